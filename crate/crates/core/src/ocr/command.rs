use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::{OcrResult, Recognizer};
use crate::{Error, ImagePlane, Result};

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// External recognizer over a line protocol: one PNG path per line on the
/// child's stdin, one UTF-8 transcript per line on its stdout. The child is
/// started once and kept alive; calls are serialized.
pub struct CommandOcr {
    program: String,
    session: Mutex<Option<Session>>,
    scratch: tempfile::TempDir,
    calls: Mutex<u64>,
}

impl std::fmt::Debug for CommandOcr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CommandOcr").field("program", &self.program).finish()
    }
}

impl CommandOcr {
    pub fn new(program: impl Into<String>) -> Result<Self> {
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(CommandOcr {
            program: program.into(),
            session: Mutex::new(None),
            scratch,
            calls: Mutex::new(0),
        })
    }

    fn spawn(&self) -> Result<Session> {
        let mut child = Command::new(&self.program)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start {}: {e}", self.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Session { child, stdin, stdout })
    }
}

impl Recognizer for CommandOcr {
    fn recognize(&self, crop: &ImagePlane) -> Result<OcrResult> {
        let n = {
            let mut c = self.calls.lock().expect("call counter poisoned");
            *c += 1;
            *c
        };
        let path = self.scratch.path().join(format!("crop_{n}.png"));
        crop.save_png(&path)?;
        let mut guard = self.session.lock().expect("ocr session poisoned");
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let s = guard.as_mut().expect("session started");
        let fail = |e: String| Error::External(format!("{}: {e}", self.program));
        writeln!(s.stdin, "{}", path.display()).and_then(|_| s.stdin.flush()).map_err(|e| fail(e.to_string()))?;
        let mut line = String::new();
        let read = s.stdout.read_line(&mut line).map_err(|e| fail(e.to_string()))?;
        let _ = std::fs::remove_file(&path);
        if read == 0 {
            *guard = None;
            return Err(fail("recognizer closed its output".into()));
        }
        let text = line.trim_end_matches(['\n', '\r']).to_string();
        let n = text.chars().count();
        Ok(OcrResult {
            text,
            per_char_confidence: vec![1.0; n],
        })
    }
}

impl Drop for CommandOcr {
    fn drop(&mut self) {
        if let Ok(mut g) = self.session.lock() {
            if let Some(mut s) = g.take() {
                drop(s.stdin);
                let _ = s.child.wait();
            }
        }
    }
}
