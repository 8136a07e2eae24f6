use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::{Error, ImagePlane, Result};

/// The whole-image upscaler `f`.
pub trait BackgroundUpscaler {
    /// Output is `factor` times larger in both dimensions.
    fn upscale(&self, image: &ImagePlane, factor: usize) -> Result<ImagePlane>;
}

pub fn check_factor(factor: usize) -> Result<()> {
    if matches!(factor, 1 | 2 | 4) {
        Ok(())
    } else {
        Err(Error::InvalidRange(format!("upscale factor must be 1, 2 or 4, got {factor}")))
    }
}

const A: f64 = -0.5;

fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four taps and weights per output coordinate, half-pixel centres.
fn taps(out_len: usize, in_len: usize, factor: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = s.floor();
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let p = base + k as f64 - 1.0;
                idx[k] = p.clamp(0.0, (in_len - 1) as f64) as usize;
                w[k] = keys(s - p);
            }
            (idx, w)
        })
        .collect()
}

/// Keys bicubic (a = −0.5) with replicate edges; factor 1 is the identity.
pub fn bicubic_upscale(image: &ImagePlane, factor: usize) -> Result<ImagePlane> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(image.clone());
    }
    let (h, w, c) = image.dims();
    let (oh, ow) = (h * factor, w * factor);
    let tx = taps(ow, w, factor);
    let ty = taps(oh, h, factor);
    let mut rows = vec![0.0; h * ow * c];
    for y in 0..h {
        for (x, (idx, wt)) in tx.iter().enumerate() {
            for ch in 0..c {
                rows[(y * ow + x) * c + ch] = (0..4).map(|k| wt[k] * image.get(y, idx[k], ch)).sum();
            }
        }
    }
    let mut out = vec![0.0; oh * ow * c];
    for (y, (idx, wt)) in ty.iter().enumerate() {
        for x in 0..ow {
            for ch in 0..c {
                let v: f64 = (0..4).map(|k| wt[k] * rows[(idx[k] * ow + x) * c + ch]).sum();
                out[(y * ow + x) * c + ch] = v.clamp(-1.0, 1.0);
            }
        }
    }
    ImagePlane::new(oh, ow, c, out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bicubic;

impl BackgroundUpscaler for Bicubic {
    fn upscale(&self, image: &ImagePlane, factor: usize) -> Result<ImagePlane> {
        bicubic_upscale(image, factor)
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// External upscaler. Per call it receives `in.png<TAB>factor<TAB>out.png` on
/// stdin, must write `out.png` and answer with a line starting `ok`.
pub struct CommandUpscaler {
    program: String,
    session: Mutex<Option<Session>>,
    scratch: tempfile::TempDir,
}

impl CommandUpscaler {
    pub fn new(program: impl Into<String>) -> Result<Self> {
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(CommandUpscaler {
            program: program.into(),
            session: Mutex::new(None),
            scratch,
        })
    }
}

impl BackgroundUpscaler for CommandUpscaler {
    fn upscale(&self, image: &ImagePlane, factor: usize) -> Result<ImagePlane> {
        check_factor(factor)?;
        let fail = |e: String| Error::External(format!("{}: {e}", self.program));
        let mut guard = self.session.lock().expect("upscaler session poisoned");
        if guard.is_none() {
            let mut child = Command::new(&self.program)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| fail(format!("cannot start: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            *guard = Some(Session { child, stdin, stdout });
        }
        let s = guard.as_mut().expect("session started");
        let input = self.scratch.path().join("in.png");
        let output = self.scratch.path().join("out.png");
        image.save_png(&input)?;
        let _ = std::fs::remove_file(&output);
        writeln!(s.stdin, "{}\t{factor}\t{}", input.display(), output.display())
            .and_then(|_| s.stdin.flush())
            .map_err(|e| fail(e.to_string()))?;
        let mut line = String::new();
        if s.stdout.read_line(&mut line).map_err(|e| fail(e.to_string()))? == 0 {
            *guard = None;
            return Err(fail("upscaler closed its output".into()));
        }
        if !line.starts_with("ok") {
            return Err(fail(format!("reported {:?}", line.trim_end())));
        }
        let out = ImagePlane::load_png(&output)?.to_channels(image.channels())?;
        if (out.height(), out.width()) != (image.height() * factor, image.width() * factor) {
            return Err(fail(format!(
                "returned {}x{} for a {}x{} input at factor {factor}",
                out.height(),
                out.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(out)
    }
}

impl Drop for CommandUpscaler {
    fn drop(&mut self) {
        if let Ok(mut g) = self.session.lock() {
            if let Some(s) = g.take() {
                let Session { mut child, stdin, .. } = s;
                drop(stdin);
                let _ = child.wait();
            }
        }
    }
}
