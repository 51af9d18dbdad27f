//! Frame ingestion, synthetic sequence generation, and result persistence.
//!
//! Synthetic scenes are evaluated from continuous scene functions, so the
//! generator can also emit the exact per-pixel flow between consecutive
//! frames. Everything is deterministic given `(spec, seed)`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Flow;

/// Planar CxHxW image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Frame { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Snap to the 8-bit grid used by every input path.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
    }

    /// Edge-replicating pad to the given extents (must not shrink).
    pub fn pad_to(&self, height: usize, width: usize) -> Frame {
        assert!(height >= self.height && width >= self.width);
        let mut out = Frame::new(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = y.min(self.height - 1);
                for x in 0..width {
                    let sx = x.min(self.width - 1);
                    out.set(c, y, x, self.at(c, sy, sx));
                }
            }
        }
        out
    }

    /// Top-left crop, used to undo padding before computing metrics.
    pub fn crop(&self, height: usize, width: usize) -> Frame {
        assert!(height <= self.height && width <= self.width);
        let mut out = Frame::new(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.at(c, y, x));
                }
            }
        }
        out
    }
}

/// Ordered frames plus the original (pre-padding) extents.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub orig_height: usize,
    pub orig_width: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map(|f| f.height).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map(|f| f.width).unwrap_or(0)
    }

    /// Frame with padding removed.
    pub fn cropped(&self, t: usize) -> Frame {
        self.frames[t].crop(self.orig_height, self.orig_width)
    }
}

fn pad4(n: usize) -> usize {
    n.div_ceil(4) * 4
}

// ── Synthetic generation ────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceKind {
    /// Smooth texture translating at a constant velocity (px/frame).
    Translation { velocity: (f64, f64) },
    /// Grid of identical motifs, each with independent sub-pixel jitter.
    RepeatedMotif { cell: usize, jitter: f64, noise_floor: f64 },
    /// Translation faster than 8 px/frame.
    FastMotion { velocity: (f64, f64) },
    /// Fixed scene plus a small temporal noise floor.
    Static { noise_floor: f64 },
    /// Frames loaded from disk (PPM/PGM directory or raw + sidecar).
    File { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    #[serde(flatten)]
    pub kind: SequenceKind,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            kind: SequenceKind::Static { noise_floor: 0.004 },
            height: 32,
            width: 32,
            frames: 8,
            seed: 11,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("sequence spec extents and frame count must be positive"));
        }
        match &self.kind {
            SequenceKind::FastMotion { velocity } => {
                let mag = (velocity.0.powi(2) + velocity.1.powi(2)).sqrt();
                if mag <= 8.0 {
                    return Err(Error::config(format!(
                        "fast_motion velocity magnitude {mag:.2} must exceed 8 px/frame"
                    )));
                }
            }
            SequenceKind::RepeatedMotif { cell, .. } => {
                if *cell < 8 {
                    return Err(Error::config("repeated_motif cell must be at least 8 px"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Band-limited periodic texture: a small sum of low-frequency sinusoids.
struct SmoothTexture {
    terms: Vec<(f64, f64, f64, f64)>, // (amplitude, u cycles, v cycles, phase)
    period_x: f64,
    period_y: f64,
}

impl SmoothTexture {
    fn random(rng: &mut ChaCha8Rng, period_x: f64, period_y: f64, amplitude: f64) -> Self {
        let n = 4;
        let mut terms = Vec::with_capacity(n);
        for _ in 0..n {
            let a = amplitude / n as f64 * (0.6 + 0.8 * rng.gen::<f64>());
            let u = rng.gen_range(1..=2) as f64 * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let v = rng.gen_range(1..=2) as f64 * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            terms.push((a, u, v, phase));
        }
        SmoothTexture { terms, period_x, period_y }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        for &(a, u, v, phase) in &self.terms {
            acc += a
                * (std::f64::consts::TAU * (u * x / self.period_x + v * y / self.period_y) + phase)
                    .sin();
        }
        acc
    }
}

/// Generates the sequence and the exact flow from frame t-1 to frame t for
/// every coded frame (index 0 carries a zero field).
pub fn generate(spec: &SequenceSpec) -> Result<(Sequence, Vec<Flow>)> {
    spec.validate()?;
    let (h, w) = (pad4(spec.height), pad4(spec.width));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind.clone() {
        SequenceKind::Translation { velocity } => {
            generate_translation(spec, h, w, velocity, 0.0, &mut rng)
        }
        SequenceKind::FastMotion { velocity } => {
            generate_translation(spec, h, w, velocity, 0.0, &mut rng)
        }
        SequenceKind::Static { noise_floor } => {
            generate_translation(spec, h, w, (0.0, 0.0), noise_floor, &mut rng)
        }
        SequenceKind::RepeatedMotif { cell, jitter, noise_floor } => {
            generate_motifs(spec, h, w, cell, jitter, noise_floor, &mut rng)
        }
        SequenceKind::File { path } => {
            let seq = load_sequence(Path::new(&path))?;
            let flows = (0..seq.len())
                .map(|_| Flow::zero(seq.height(), seq.width()))
                .collect();
            Ok((seq, flows))
        }
    }
}

fn generate_translation(
    spec: &SequenceSpec,
    h: usize,
    w: usize,
    velocity: (f64, f64),
    noise_floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Sequence, Vec<Flow>)> {
    let textures: Vec<SmoothTexture> = (0..3)
        .map(|_| SmoothTexture::random(rng, w as f64, h as f64, 0.42))
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::new(3, h, w);
        let (sx, sy) = (t as f64 * velocity.0, t as f64 * velocity.1);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5 + textures[c].eval(x as f64 - sx, y as f64 - sy);
                    frame.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        if noise_floor > 0.0 {
            for v in &mut frame.data {
                *v = (*v + noise_floor * (rng.gen::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0);
            }
        }
        frame.quantize_8bit();
        frames.push(frame);
        flows.push(if t == 0 {
            Flow::zero(h, w)
        } else {
            Flow::constant(velocity.0, velocity.1, h, w)
        });
    }
    Ok((
        Sequence { frames, fps: 30.0, orig_height: spec.height, orig_width: spec.width },
        flows,
    ))
}

struct MotifInstance {
    freq: (f64, f64),
    phase: (f64, f64),
}

impl MotifInstance {
    /// Smooth bounded jitter displacement at frame t.
    fn offset(&self, t: f64, amplitude: f64) -> (f64, f64) {
        (
            amplitude * (std::f64::consts::TAU * (self.freq.0 * t + self.phase.0)).sin(),
            amplitude * (std::f64::consts::TAU * (self.freq.1 * t + self.phase.1)).sin(),
        )
    }
}

fn generate_motifs(
    spec: &SequenceSpec,
    h: usize,
    w: usize,
    cell: usize,
    jitter: f64,
    noise_floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Sequence, Vec<Flow>)> {
    let (gy, gx) = (h / cell, w / cell);
    if gy == 0 || gx == 0 {
        return Err(Error::config("repeated_motif cell larger than the frame"));
    }
    // One motif shared by all instances: a Gabor-like patch per channel.
    let motif_phase: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
    let motif_freq = 1.5 + rng.gen::<f64>();
    let sigma = cell as f64 / 6.5;
    let motif = move |c: usize, u: f64, v: f64| -> f64 {
        let r2 = u * u + v * v;
        let env = (-0.5 * r2 / (sigma * sigma)).exp();
        0.38 * env
            * (std::f64::consts::TAU * motif_freq * (u + 0.7 * v) / cell as f64 + motif_phase[c])
                .sin()
    };
    let instances: Vec<MotifInstance> = (0..gy * gx)
        .map(|_| MotifInstance {
            freq: (0.05 + 0.1 * rng.gen::<f64>(), 0.05 + 0.1 * rng.gen::<f64>()),
            phase: (rng.gen::<f64>(), rng.gen::<f64>()),
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::new(3, h, w);
        let mut flow = Flow::zero(h, w);
        for cy in 0..gy {
            for cx in 0..gx {
                let inst = &instances[cy * gx + cx];
                let (jx, jy) = inst.offset(t as f64, jitter);
                let (pjx, pjy) = inst.offset(t as f64 - 1.0, jitter);
                let (cx0, cy0) = ((cx * cell) as f64, (cy * cell) as f64);
                let centre = (cell as f64 - 1.0) / 2.0;
                for y in cy * cell..(cy + 1) * cell {
                    for x in cx * cell..(cx + 1) * cell {
                        let u = x as f64 - cx0 - centre - jx;
                        let v = y as f64 - cy0 - centre - jy;
                        for c in 0..3 {
                            let val = 0.5 + motif(c, u, v);
                            frame.set(c, y, x, val.clamp(0.0, 1.0));
                        }
                        let p = y * w + x;
                        flow.dx[p] = jx - pjx;
                        flow.dy[p] = jy - pjy;
                    }
                }
            }
        }
        if noise_floor > 0.0 {
            for v in &mut frame.data {
                *v = (*v + noise_floor * (rng.gen::<f64>() - 0.5) * 2.0).clamp(0.0, 1.0);
            }
        }
        frame.quantize_8bit();
        frames.push(frame);
        flows.push(if t == 0 { Flow::zero(h, w) } else { flow });
    }
    Ok((
        Sequence { frames, fps: 30.0, orig_height: spec.height, orig_width: spec.width },
        flows,
    ))
}

// ── PPM / PGM ───────────────────────────────────────────────────────────

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut bytes = Vec::with_capacity(frame.height * frame.width * frame.channels + 32);
    let magic = if frame.channels == 3 { "P6" } else { "P5" };
    bytes.extend_from_slice(format!("{magic}\n{} {}\n255\n", frame.width, frame.height).as_bytes());
    for y in 0..frame.height {
        for x in 0..frame.width {
            for c in 0..frame.channels {
                bytes.push((frame.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pnm(&raw).map_err(|msg| Error::input(format!("{}: {msg}", path.display())))
}

fn parse_pnm(raw: &[u8]) -> std::result::Result<Frame, String> {
    let mut pos = 0;
    let mut token = |raw: &[u8]| -> std::result::Result<String, String> {
        // skip whitespace and # comments
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    let magic = token(raw)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let width: usize = token(raw)?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token(raw)?.parse().map_err(|_| "bad height".to_string())?;
    let maxval: usize = token(raw)?.parse().map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero extents".into());
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if raw.len() < pos + need {
        return Err(format!("truncated data: need {need} bytes, have {}", raw.len() - pos));
    }
    let mut frame = Frame::new(channels, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let b = raw[pos + (y * width + x) * channels + c];
                frame.set(c, y, x, b as f64 / 255.0);
            }
        }
    }
    Ok(frame)
}

// ── Raw planar + sidecar ────────────────────────────────────────────────

#[derive(Serialize, Deserialize, Debug)]
pub struct RawSidecar {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
}

pub fn write_raw(path: &Path, seq: &Sequence) -> Result<()> {
    let (h, w) = (seq.orig_height, seq.orig_width);
    let channels = seq.frames[0].channels;
    let mut bytes = Vec::with_capacity(seq.len() * channels * h * w);
    for t in 0..seq.len() {
        let f = seq.cropped(t);
        for v in &f.data {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let sidecar = RawSidecar { height: h, width: w, channels, frames: seq.len() };
    let sc_path = sidecar_path(path);
    fs::write(
        &sc_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(sc_path.display().to_string(), e))
}

fn sidecar_path(raw: &Path) -> PathBuf {
    let mut p = raw.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Loads a sequence from a directory of PPM/PGM frames or a raw planar file
/// with a JSON sidecar. Frames are normalized to [0,1] and padded to
/// multiple-of-4 extents with edge replication.
pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let frames = if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ppm") | Some("pgm")
                )
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::input(format!("{}: no PPM/PGM frames found", path.display())));
        }
        entries.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?
    } else {
        let sc_path = sidecar_path(path);
        let sc_raw = fs::read_to_string(&sc_path)
            .map_err(|e| Error::io(sc_path.display().to_string(), e))?;
        let sc: RawSidecar = serde_json::from_str(&sc_raw)
            .map_err(|e| Error::input(format!("{}: bad sidecar: {e}", sc_path.display())))?;
        let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let per_frame = sc.height * sc.width * sc.channels;
        if raw.len() != per_frame * sc.frames {
            return Err(Error::input(format!(
                "{}: raw size {} does not match sidecar ({} frames x {} bytes)",
                path.display(),
                raw.len(),
                sc.frames,
                per_frame
            )));
        }
        (0..sc.frames)
            .map(|t| {
                let mut frame = Frame::new(sc.channels, sc.height, sc.width);
                for (i, v) in frame.data.iter_mut().enumerate() {
                    *v = raw[t * per_frame + i] as f64 / 255.0;
                }
                frame
            })
            .collect()
    };

    let (h0, w0, c0) = (frames[0].height, frames[0].width, frames[0].channels);
    for (i, f) in frames.iter().enumerate() {
        if f.height != h0 || f.width != w0 || f.channels != c0 {
            return Err(Error::input(format!(
                "inconsistent frame sizes: frame {i} is {}x{}x{}, expected {}x{}x{}",
                f.channels, f.height, f.width, c0, h0, w0
            )));
        }
    }
    let (ph, pw) = (pad4(h0), pad4(w0));
    let frames = frames
        .into_iter()
        .map(|f| if f.height == ph && f.width == pw { f } else { f.pad_to(ph, pw) })
        .collect();
    Ok(Sequence { frames, fps: 30.0, orig_height: h0, orig_width: w0 })
}

// ── Results persistence ─────────────────────────────────────────────────

pub const RD_SCHEMA: &str = "# schema: nlvc-rd-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RdRow {
    pub label: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim: f64,
}

/// Writes RD rows; with `append` the schema line of an existing file is
/// validated instead of rewritten.
pub fn write_rd_rows(path: &Path, rows: &[RdRow], append: bool) -> Result<()> {
    let exists = path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(append && exists)
        .write(true)
        .truncate(!(append && exists))
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if append && exists {
        validate_rd_schema(path)?;
    } else {
        writeln!(file, "{RD_SCHEMA}").map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(file, "label,bpp,psnr_db,msssim")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    for r in rows {
        writeln!(file, "{},{:.8},{:.6},{:.8}", r.label, r.bpp, r.psnr_db, r.msssim)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

fn validate_rd_schema(path: &Path) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if first.trim_end() != RD_SCHEMA {
        return Err(Error::input(format!(
            "{}: schema mismatch: found {:?}, expected {:?}",
            path.display(),
            first.trim_end(),
            RD_SCHEMA
        )));
    }
    Ok(())
}

pub fn read_rd_rows(path: &Path) -> Result<Vec<RdRow>> {
    validate_rd_schema(path)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut schema_line = String::new();
    reader
        .read_line(&mut schema_line)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    {
        let headers = csv_reader
            .headers()
            .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        let expected = ["label", "bpp", "psnr_db", "msssim"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::input(format!(
                "{}: header mismatch: {:?}",
                path.display(),
                headers
            )));
        }
    }
    let mut rows = Vec::new();
    for rec in csv_reader.deserialize() {
        let row: RdRow = rec.map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

/// JSON manifest written next to every command's outputs.
#[derive(Serialize, Deserialize, Debug)]
pub struct RunManifest {
    pub tool: String,
    pub schema: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64, outputs: Vec<String>) -> Self {
        RunManifest {
            tool: "nlvc".into(),
            schema: 1,
            command: command.into(),
            config_hash,
            seed,
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// BT.601 full-range YUV -> RGB, for external data prepared in YUV.
pub fn yuv_to_rgb_bt601(y: f64, u: f64, v: f64) -> (f64, f64, f64) {
    let (up, vp) = (u - 0.5, v - 0.5);
    let r = y + 1.402 * vp;
    let g = y - 0.344_136 * up - 0.714_136 * vp;
    let b = y + 1.772 * up;
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("nlvc-io-{name}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SequenceSpec {
            kind: SequenceKind::RepeatedMotif { cell: 16, jitter: 1.0, noise_floor: 0.004 },
            height: 32,
            width: 32,
            frames: 4,
            seed: 3,
        };
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
    }

    #[test]
    fn translation_shifts_frame_zero() {
        let spec = SequenceSpec {
            kind: SequenceKind::Translation { velocity: (1.0, 0.0) },
            height: 16,
            width: 16,
            frames: 4,
            seed: 9,
        };
        let (seq, _) = generate(&spec).unwrap();
        let t = 3;
        for c in 0..3 {
            for y in 0..16 {
                for x in t..16 {
                    assert_eq!(seq.frames[t].at(c, y, x), seq.frames[0].at(c, y, x - t));
                }
            }
        }
    }

    #[test]
    fn motif_zero_jitter_instances_identical() {
        let spec = SequenceSpec {
            kind: SequenceKind::RepeatedMotif { cell: 16, jitter: 0.0, noise_floor: 0.0 },
            height: 32,
            width: 32,
            frames: 2,
            seed: 5,
        };
        let (seq, _) = generate(&spec).unwrap();
        let f = &seq.frames[0];
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(f.at(c, y, x), f.at(c, y + 16, x));
                    assert_eq!(f.at(c, y, x), f.at(c, y, x + 16));
                    assert_eq!(f.at(c, y, x), f.at(c, y + 16, x + 16));
                }
            }
        }
    }

    #[test]
    fn ppm_roundtrip_bit_exact() {
        let dir = tmpdir("ppm");
        let spec = SequenceSpec {
            kind: SequenceKind::Static { noise_floor: 0.01 },
            height: 12,
            width: 20,
            frames: 1,
            seed: 2,
        };
        let (seq, _) = generate(&spec).unwrap();
        let frame = seq.cropped(0);
        let path = dir.join("f0.ppm");
        write_ppm(&path, &frame).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data, frame.data);
    }

    #[test]
    fn raw_sidecar_roundtrip_and_padding() {
        let dir = tmpdir("raw");
        let spec = SequenceSpec {
            kind: SequenceKind::Static { noise_floor: 0.0 },
            height: 30,
            width: 30,
            frames: 3,
            seed: 2,
        };
        let (seq, _) = generate(&spec).unwrap();
        let path = dir.join("seq.raw");
        write_raw(&path, &seq).unwrap();
        let loaded = load_sequence(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!((loaded.height(), loaded.width()), (32, 32));
        assert_eq!((loaded.orig_height, loaded.orig_width), (30, 30));
        // padded edge must replicate the last original row/column
        let f = &loaded.frames[0];
        assert_eq!(f.at(0, 31, 5), f.at(0, 29, 5));
        assert_eq!(f.at(0, 5, 31), f.at(0, 5, 29));
        // content round-trips through the 8-bit file
        let orig0 = seq.cropped(0);
        assert_eq!(loaded.cropped(0).data, orig0.data);
    }

    #[test]
    fn malformed_headers_error() {
        let dir = tmpdir("bad");
        let p = dir.join("bad.ppm");
        fs::write(&p, b"P7\n4 4\n255\n").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Input(_))));
        let p2 = dir.join("trunc.ppm");
        fs::write(&p2, b"P6\n4 4\n255\n0123").unwrap();
        assert!(matches!(read_ppm(&p2), Err(Error::Input(_))));
    }

    #[test]
    fn rd_rows_roundtrip_and_schema_guard() {
        let dir = tmpdir("rd");
        let path = dir.join("rd.csv");
        let rows = vec![
            RdRow { label: "a".into(), bpp: 0.1, psnr_db: 30.0, msssim: 0.9 },
            RdRow { label: "a".into(), bpp: 0.2, psnr_db: 32.0, msssim: 0.95 },
        ];
        write_rd_rows(&path, &rows, false).unwrap();
        let back = read_rd_rows(&path).unwrap();
        assert_eq!(back, rows);
        // appending keeps the single schema line
        write_rd_rows(&path, &rows, true).unwrap();
        assert_eq!(read_rd_rows(&path).unwrap().len(), 4);
        // wrong schema is an explicit error
        let bad = dir.join("bad.csv");
        fs::write(&bad, "# schema: nlvc-rd-v0\nlabel,bpp,psnr_db,msssim\n").unwrap();
        assert!(matches!(read_rd_rows(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn large_table_reads_quickly() {
        let dir = tmpdir("bigtable");
        let path = dir.join("big.csv");
        let rows: Vec<RdRow> = (0..10_000)
            .map(|i| RdRow {
                label: format!("r{i}"),
                bpp: 0.1 + i as f64 * 1e-5,
                psnr_db: 30.0,
                msssim: 0.9,
            })
            .collect();
        write_rd_rows(&path, &rows, false).unwrap();
        let start = std::time::Instant::now();
        let back = read_rd_rows(&path).unwrap();
        assert_eq!(back.len(), 10_000);
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }
}
