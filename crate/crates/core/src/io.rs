//! On-disk formats: the binary grid file, 2-D CSV, JSON patch documents and
//! PPM/PGM frame sequences.
//!
//! Grid file layout, all little-endian:
//!
//! ```text
//! b"SPLG" | version: u32 = 1 | d: u32 | dims: d x u64 | payload: n x f64 (row-major)
//! ```

use std::fmt;
use std::fs;
use std::io::{BufRead, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Grid, PatchSet, Rect};
use crate::splade::{DetectedPatch, Detection, Diagnostics};

pub const MAGIC: [u8; 4] = *b"SPLG";
pub const VERSION: u32 = 1;

pub fn write_grid<W: Write>(mut w: W, grid: &Grid) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * grid.ndim() + 8 * grid.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.ndim() as u32).to_le_bytes());
    for &n in grid.dims() {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for &v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated(format!("{what}: need {n} bytes, {} left", bytes.len())));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u32_at(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().unwrap()))
}

/// Decodes a grid file held in memory.
pub fn decode_grid(mut bytes: &[u8]) -> Result<Grid> {
    let magic: [u8; 4] = take(&mut bytes, 4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32_at(&mut bytes, "version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let d = u32_at(&mut bytes, "dimension count")? as usize;
    if d == 0 || d > crate::lattice::MAX_DIM {
        return Err(Error::InvalidDims(format!("grid file declares {d} axes")));
    }
    let mut dims = Vec::with_capacity(d);
    for _ in 0..d {
        let n = u64::from_le_bytes(take(&mut bytes, 8, "dims")?.try_into().unwrap());
        dims.push(usize::try_from(n).map_err(|_| Error::DimensionOverflow(vec![usize::MAX]))?);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .ok_or_else(|| Error::DimensionOverflow(dims.clone()))?;
    let payload = take(&mut bytes, 8 * len, "payload")?;
    if !bytes.is_empty() {
        return Err(Error::Malformed(format!("{} trailing bytes after payload", bytes.len())));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::new(dims, data)
}

pub fn read_grid<R: Read>(mut r: R) -> Result<Grid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_grid(&bytes)
}

pub fn save_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_grid(std::io::BufWriter::new(fs::File::create(path)?), grid)
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    decode_grid(&fs::read(path)?)
}

/// One line per row, comma-separated, shortest round-trip decimals.
pub fn grid_to_csv(grid: &Grid) -> Result<String> {
    if grid.ndim() != 2 {
        return Err(Error::DimMismatch(format!("CSV needs a 2-D grid, got {:?}", grid.dims())));
    }
    let cols = grid.dims()[1];
    let mut out = String::new();
    for row in grid.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn grid_from_csv<R: BufRead>(r: R) -> Result<Grid> {
    let mut data = Vec::new();
    let (mut rows, mut cols) = (0usize, None);
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("line {}: bad number {field:?}", lineno + 1)))?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Malformed(format!("line {}: {width} fields, expected {c}", lineno + 1)));
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Malformed("empty CSV".into()))?;
    Grid::new(vec![rows, cols], data)
}

/// Serialized detection result; `diagnostics` is absent for ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDoc {
    pub dims: Vec<usize>,
    pub k_hat: usize,
    pub patches: Vec<DetectedPatch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl PatchDoc {
    /// The true patches, with their jumps in the `jump_estimate` slot.
    pub fn from_truth(dims: &[usize], truth: &PatchSet) -> Self {
        let patches: Vec<DetectedPatch> = truth
            .patches
            .iter()
            .map(|p| DetectedPatch {
                rect: p.rect.clone(),
                jump_estimate: p.jump,
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            k_hat: patches.len(),
            patches,
            diagnostics: None,
        }
    }

    pub fn rects(&self) -> Vec<Rect> {
        self.patches.iter().map(|p| p.rect.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s)?;
        if doc.k_hat != doc.patches.len() {
            return Err(Error::Malformed(format!(
                "k_hat {} but {} patches",
                doc.k_hat,
                doc.patches.len()
            )));
        }
        for p in &doc.patches {
            p.rect.check_within(&doc.dims)?;
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

impl From<Detection> for PatchDoc {
    fn from(d: Detection) -> Self {
        Self {
            dims: d.dims,
            k_hat: d.k_hat,
            patches: d.patches,
            diagnostics: Some(d.diagnostics),
        }
    }
}

impl TryFrom<PatchDoc> for Detection {
    type Error = Error;

    fn try_from(doc: PatchDoc) -> Result<Self> {
        let diagnostics = doc
            .diagnostics
            .ok_or_else(|| Error::Malformed("patch document has no diagnostics".into()))?;
        Ok(Self {
            dims: doc.dims,
            k_hat: doc.k_hat,
            patches: doc.patches,
            diagnostics,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Channel {
    R,
    G,
    B,
    /// Average of the three colour channels.
    #[default]
    Mean,
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(Self::R),
            "g" => Ok(Self::G),
            "b" => Ok(Self::B),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::InvalidParameter(format!("unknown channel {s:?} (r, g, b or mean)"))),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::R => "r",
            Self::G => "g",
            Self::B => "b",
            Self::Mean => "mean",
        })
    }
}

/// Parses a half-open frame range `start:end`.
pub fn parse_range(s: &str) -> Result<Range<usize>> {
    let bad = || Error::InvalidParameter(format!("range {s:?} is not start:end"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let start = a.trim().parse().map_err(|_| bad())?;
    let end = b.trim().parse().map_err(|_| bad())?;
    Ok(start..end)
}

fn is_pnm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm"))
}

/// A directory of equally sized PPM/PGM frames in lexicographic filename order.
#[derive(Debug, Clone)]
pub struct FrameSet {
    paths: Vec<PathBuf>,
    /// (width, height) of the first frame.
    size: (u32, u32),
}

impl FrameSet {
    /// Lists the directory; hidden files are skipped, anything else that is not
    /// PPM/PGM is an error.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() || entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            let path = entry.path();
            if !is_pnm(&path) {
                return Err(Error::UnsupportedFormat(path));
            }
            paths.push(path);
        }
        paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        let first = paths
            .first()
            .ok_or_else(|| Error::Degenerate(format!("no frames in {}", dir.display())))?;
        let size = image::image_dimensions(first)?;
        Ok(Self { paths, size })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    /// Grid shape of every frame: `[height, width]`.
    pub fn dims(&self) -> [usize; 2] {
        [self.size.1 as usize, self.size.0 as usize]
    }

    /// Channel values of frame `i` scaled to [0, 1], as a `height x width` grid.
    pub fn load_channel(&self, i: usize, channel: Channel) -> Result<Grid> {
        let path = &self.paths[i];
        let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
        let size = (img.width(), img.height());
        if size != self.size {
            return Err(Error::MixedFrameSizes {
                path: path.clone(),
                expected: self.size,
                got: size,
            });
        }
        let rgb = img.into_rgb32f();
        let data = rgb
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                let v = match channel {
                    Channel::R => r,
                    Channel::G => g,
                    Channel::B => b,
                    Channel::Mean => (r + g + b) / 3.0,
                };
                v as f64
            })
            .collect();
        Grid::new(self.dims().to_vec(), data)
    }

    /// Mean channel image over the frames in `range`.
    pub fn baseline(&self, range: Range<usize>, channel: Channel) -> Result<Grid> {
        if range.is_empty() {
            return Err(Error::EmptyBaseline);
        }
        if range.end > self.len() {
            return Err(Error::InvalidParameter(format!(
                "baseline {}:{} exceeds {} frames",
                range.start,
                range.end,
                self.len()
            )));
        }
        let count = range.len() as f64;
        let mut acc: Option<Grid> = None;
        for i in range {
            let g = self.load_channel(i, channel)?;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            }
        }
        let mut mean = acc.expect("range is non-empty");
        mean.data_mut().iter_mut().for_each(|x| *x /= count);
        Ok(mean)
    }

    /// Frame `i` minus the baseline image, in [-1, 1].
    pub fn centred(&self, i: usize, channel: Channel, baseline: &Grid) -> Result<Grid> {
        let mut g = self.load_channel(i, channel)?;
        if g.dims() != baseline.dims() {
            return Err(Error::DimMismatch(format!("frame {:?} vs baseline {:?}", g.dims(), baseline.dims())));
        }
        g.data_mut()
            .iter_mut()
            .zip(baseline.data())
            .for_each(|(x, b)| *x = (*x - b).clamp(-1.0, 1.0));
        Ok(g)
    }
}

/// Every frame in `dir`, centred on the mean of the frames in `baseline`.
pub fn frames_to_grids(dir: &Path, baseline: Range<usize>, channel: Channel) -> Result<Vec<Grid>> {
    let frames = FrameSet::open(dir)?;
    let base = frames.baseline(baseline, channel)?;
    (0..frames.len()).map(|i| frames.centred(i, channel, &base)).collect()
}
