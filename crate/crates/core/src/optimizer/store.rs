//! File-backed model state.
//!
//! A store directory holds three raw little-endian f32 arrays, one per state
//! kind, with layers concatenated in layer order:
//!
//! ```text
//! params.f32
//! m.f32
//! v.f32
//! manifest.txt
//! ```
//!
//! `manifest.txt` is plain text:
//!
//! ```text
//! innet-store v1
//! dtype f32le
//! step <completed optimizer steps>
//! layers <L>
//! <layer_id> <param_count> <byte_offset>
//! ...
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST: &str = "manifest.txt";
const MAGIC_LINE: &str = "innet-store v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("layer {0} out of range")]
    NoSuchLayer(usize),
    #[error("layer {layer} holds {expected} elements, got {got}")]
    Length { layer: usize, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateKind {
    Params,
    M,
    V,
}

impl StateKind {
    pub const ALL: [StateKind; 3] = [StateKind::Params, StateKind::M, StateKind::V];

    pub fn file_name(self) -> &'static str {
        match self {
            StateKind::Params => "params.f32",
            StateKind::M => "m.f32",
            StateKind::V => "v.f32",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub layer_id: usize,
    pub param_count: usize,
    /// Element offset into each state file.
    pub offset: usize,
}

impl LayerSpec {
    pub fn byte_offset(&self) -> u64 {
        4 * self.offset as u64
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.param_count as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreLayout {
    layers: Vec<LayerSpec>,
}

impl StoreLayout {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut offset = 0;
        let layers = counts
            .iter()
            .enumerate()
            .map(|(layer_id, &param_count)| {
                let spec = LayerSpec { layer_id, param_count, offset };
                offset += param_count;
                spec
            })
            .collect();
        StoreLayout { layers }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> Result<&LayerSpec, StoreError> {
        self.layers.get(id).ok_or(StoreError::NoSuchLayer(id))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total element count `S`.
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoreInit {
    Zeros,
    SeededRandom { seed: u64, scale: f32 },
}

impl StoreInit {
    pub fn initial_params(&self, total: usize) -> Vec<f32> {
        match *self {
            StoreInit::Zeros => vec![0.0; total],
            StoreInit::SeededRandom { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..total).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()
            }
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug)]
pub struct ModelStateStore {
    dir: PathBuf,
    layout: StoreLayout,
    files: [File; 3],
    step: u64,
}

impl ModelStateStore {
    /// Creates (or truncates) a store with the given parameters and zero moments.
    pub fn create(dir: &Path, layout: StoreLayout, params: &[f32]) -> Result<Self, StoreError> {
        assert_eq!(params.len(), layout.total(), "initial parameter count");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let zeros = vec![0.0f32; layout.total()];
        for kind in StateKind::ALL {
            let path = dir.join(kind.file_name());
            let data = if kind == StateKind::Params { params } else { &zeros };
            fs::write(&path, f32_to_bytes(data)).map_err(io_err(&path))?;
        }
        let mut store = Self::open_files(dir, layout, 0)?;
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let (layout, step) = read_manifest(dir)?;
        Self::open_files(dir, layout, step)
    }

    fn open_files(dir: &Path, layout: StoreLayout, step: u64) -> Result<Self, StoreError> {
        let open = |kind: StateKind| {
            let path = dir.join(kind.file_name());
            let f = OpenOptions::new().read(true).write(true).open(&path).map_err(io_err(&path))?;
            let len = f.metadata().map_err(io_err(&path))?.len();
            if len != 4 * layout.total() as u64 {
                return Err(StoreError::Manifest {
                    path,
                    msg: format!("file holds {len} bytes, layout needs {}", 4 * layout.total()),
                });
            }
            Ok(f)
        };
        Ok(ModelStateStore {
            dir: dir.to_path_buf(),
            files: [open(StateKind::Params)?, open(StateKind::M)?, open(StateKind::V)?],
            layout,
            step,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) -> Result<(), StoreError> {
        self.step = step;
        self.write_manifest()
    }

    pub fn read(&mut self, kind: StateKind, layer: usize) -> Result<Vec<f32>, StoreError> {
        let spec = *self.layout.layer(layer)?;
        let path = self.dir.join(kind.file_name());
        let f = &mut self.files[kind.index()];
        let mut bytes = vec![0u8; spec.byte_len() as usize];
        f.seek(SeekFrom::Start(spec.byte_offset())).map_err(io_err(&path))?;
        f.read_exact(&mut bytes).map_err(io_err(&path))?;
        Ok(bytes_to_f32(&bytes))
    }

    pub fn write(&mut self, kind: StateKind, layer: usize, data: &[f32]) -> Result<(), StoreError> {
        let spec = *self.layout.layer(layer)?;
        if data.len() != spec.param_count {
            return Err(StoreError::Length { layer, expected: spec.param_count, got: data.len() });
        }
        let path = self.dir.join(kind.file_name());
        let f = &mut self.files[kind.index()];
        f.seek(SeekFrom::Start(spec.byte_offset())).map_err(io_err(&path))?;
        f.write_all(&f32_to_bytes(data)).map_err(io_err(&path))
    }

    pub fn read_all(&mut self, kind: StateKind) -> Result<Vec<f32>, StoreError> {
        let mut out = Vec::with_capacity(self.layout.total());
        for l in 0..self.layout.num_layers() {
            out.extend(self.read(kind, l)?);
        }
        Ok(out)
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        for kind in StateKind::ALL {
            let path = self.dir.join(kind.file_name());
            self.files[kind.index()].flush().map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn write_manifest(&mut self) -> Result<(), StoreError> {
        let path = self.dir.join(MANIFEST);
        fs::write(&path, render_manifest(&self.layout, self.step)).map_err(io_err(&path))
    }
}

pub fn render_manifest(layout: &StoreLayout, step: u64) -> String {
    let mut s = format!("{MAGIC_LINE}\ndtype f32le\nstep {step}\nlayers {}\n", layout.num_layers());
    for l in layout.layers() {
        s.push_str(&format!("{} {} {}\n", l.layer_id, l.param_count, l.byte_offset()));
    }
    s
}

pub fn read_manifest(dir: &Path) -> Result<(StoreLayout, u64), StoreError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    parse_manifest(&text).map_err(|msg| StoreError::Manifest { path, msg })
}

pub fn parse_manifest(text: &str) -> Result<(StoreLayout, u64), String> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC_LINE) {
        return Err(format!("first line must be `{MAGIC_LINE}`"));
    }
    if lines.next() != Some("dtype f32le") {
        return Err("expected `dtype f32le`".into());
    }
    let field = |line: Option<&str>, key: &str| -> Result<u64, String> {
        let line = line.ok_or_else(|| format!("missing `{key}`"))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| format!("bad `{key}` line: {line:?}"))
    };
    let step = field(lines.next(), "step")?;
    let n = field(lines.next(), "layers")? as usize;
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines.next().ok_or_else(|| format!("missing layer line {i}"))?;
        let nums: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("bad layer line {line:?}")))
            .collect::<Result<_, _>>()?;
        let [id, count, _] = nums[..] else { return Err(format!("bad layer line {line:?}")) };
        if id as usize != i {
            return Err(format!("layer ids must be dense and ordered, got {id} at {i}"));
        }
        counts.push(count as usize);
    }
    let layout = StoreLayout::from_counts(&counts);
    for (spec, line) in layout.layers().iter().zip(text.lines().skip(4)) {
        let off: u64 = line.split_whitespace().nth(2).and_then(|t| t.parse().ok()).unwrap_or(u64::MAX);
        if off != spec.byte_offset() {
            return Err(format!("layer {} offset {off} is not contiguous", spec.layer_id));
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err("trailing content".into());
    }
    Ok((layout, step))
}

pub fn f32_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Writes a complete store in one go, used by the single-process reference.
pub fn write_store(dir: &Path, layout: &StoreLayout, step: u64, p: &[f32], m: &[f32], v: &[f32]) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (kind, data) in StateKind::ALL.into_iter().zip([p, m, v]) {
        let path = dir.join(kind.file_name());
        fs::write(&path, f32_to_bytes(data)).map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, render_manifest(layout, step)).map_err(io_err(&path))
}
