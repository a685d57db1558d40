use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use drive_imitation::session::{Session, SILENCE_LIMIT};
use drive_imitation::track::Track;
use drive_imitation::{Error, Result};

use crate::commands::resolve_track;

/// How often a blocked read wakes up to check for client silence.
const POLL: Duration = Duration::from_millis(500);

pub fn run(bind: &str, port: u16, track: &str, out_dir: &Path) -> Result<()> {
    let track = Arc::new(resolve_track(track)?);
    let listener = TcpListener::bind((bind, port)).map_err(|e| Error::io(format!("{bind}:{port}"), e))?;
    let addr = listener.local_addr().map_err(|e| Error::io(format!("{bind}:{port}"), e))?;
    println!("listening on {addr} (track {})", track.id);
    let _ = std::io::stdout().flush();
    let counter = AtomicUsize::new(0);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let id = format!("s{}", counter.fetch_add(1, Ordering::Relaxed) + 1);
        let track = Arc::clone(&track);
        let out_dir = out_dir.to_path_buf();
        std::thread::spawn(move || {
            if let Err(e) = handle(stream, track, &id, out_dir) {
                eprintln!("session {id}: {e}");
            }
        });
    }
    Ok(())
}

fn handle(stream: TcpStream, track: Arc<Track>, id: &str, out_dir: PathBuf) -> std::io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut session = Session::new(track, id, out_dir);
    let mut line = Vec::new();
    let mut last_heard = Instant::now();
    loop {
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => return Ok(()),
            Ok(_) if line.ends_with(b"\n") => {
                last_heard = Instant::now();
                let text = String::from_utf8_lossy(&line).into_owned();
                line.clear();
                if text.trim().is_empty() {
                    continue;
                }
                let mut out = String::new();
                for reply in session.handle_line(&text) {
                    out.push_str(&reply.to_line());
                }
                writer.write_all(out.as_bytes())?;
            }
            // partial line at EOF
            Ok(_) => return Ok(()),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if last_heard.elapsed() > SILENCE_LIMIT {
                    if let Some(msg) = session.on_silence() {
                        writer.write_all(msg.to_line().as_bytes())?;
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}
