//! Feature ingestion, speech marks, reference labels and the uniform
//! segment grid.
//!
//! Features travel in the FMX1 container: magic `FMX1`, u32 LE version (=1),
//! u32 frames, u32 dim, u32 frame shift in microseconds, then frames*dim
//! IEEE-754 32-bit LE floats, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

const FMX_MAGIC: &[u8; 4] = b"FMX1";
const FMX_VERSION: u32 = 1;

/// Acoustic feature matrix, frames x dim, with frame-shift metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
    frame_shift_us: u32,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>, frame_shift_us: u32) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::Parameter("feature dim must be >= 1".into()));
        }
        if frame_shift_us == 0 {
            return Err(Error::Parameter("frame shift must be > 0".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains NaN/Inf".into()));
        }
        Ok(FeatureMatrix { data, frame_shift_us })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame_shift_us(&self) -> u32 {
        self.frame_shift_us
    }

    /// Frame shift in seconds.
    pub fn frame_shift(&self) -> f64 {
        self.frame_shift_us as f64 * 1e-6
    }

    /// Total audio span covered by the frames, in seconds.
    pub fn span(&self) -> f64 {
        self.frames() as f64 * self.frame_shift()
    }

    pub fn frame(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("file shorter than FMX1 header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file shorter than FMX1 header".into()))?;
    if &magic != FMX_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected FMX1")));
    }
    let version = read_u32(&mut r)?;
    if version != FMX_VERSION {
        return Err(Error::Format(format!("unsupported FMX1 version {version}")));
    }
    let frames = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let frame_shift_us = read_u32(&mut r)?;
    if dim == 0 {
        return Err(Error::Format("declared dim is 0".into()));
    }
    if frame_shift_us == 0 {
        return Err(Error::Format("declared frame shift is 0".into()));
    }
    let n = frames
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("declared size overflows".into()))?;
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format("payload shorter than declared frames x dim".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("payload longer than declared frames x dim".into()));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature payload contains NaN/Inf".into()));
    }
    let data = Array2::from_shape_vec((frames, dim), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    FeatureMatrix::new_allow_empty(data, frame_shift_us)
}

pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FMX_MAGIC)?;
    w.write_all(&FMX_VERSION.to_le_bytes())?;
    w.write_all(&(m.frames() as u32).to_le_bytes())?;
    w.write_all(&(m.dim() as u32).to_le_bytes())?;
    w.write_all(&m.frame_shift_us().to_le_bytes())?;
    for v in m.data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

impl FeatureMatrix {
    // `new` forbids dim 0 but 0 frames is fine everywhere.
    fn new_allow_empty(data: Array2<f32>, frame_shift_us: u32) -> Result<Self> {
        Self::new(data, frame_shift_us)
    }
}

/// Oracle speech intervals in seconds, sorted and non-overlapping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeechMarks {
    intervals: Vec<(f64, f64)>,
}

impl SpeechMarks {
    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self> {
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(s, e) in &intervals {
            if !(s < e) {
                return Err(Error::Parameter(format!("speech mark {s}..{e} has start >= end")));
            }
            if s < 0.0 {
                return Err(Error::Parameter(format!("speech mark starts before 0: {s}")));
            }
        }
        for w in intervals.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::Parameter(format!(
                    "speech marks overlap: {:?} and {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(SpeechMarks { intervals })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(s, e)| t >= s && t < e)
    }

    pub fn end(&self) -> f64 {
        self.intervals.last().map_or(0.0, |&(_, e)| e)
    }
}

/// Text format: one "start_seconds end_seconds" pair per line.
pub fn read_speech_marks(path: &Path) -> Result<SpeechMarks> {
    let text = std::fs::read_to_string(path)?;
    let mut intervals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.ok_or(Error::Parse { line: i + 1, msg: "expected two fields".into() })?
                .parse::<f64>()
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })
        };
        let s = parse(it.next())?;
        let e = parse(it.next())?;
        intervals.push((s, e));
    }
    SpeechMarks::new(intervals)
}

pub fn write_speech_marks(marks: &SpeechMarks, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &(s, e) in marks.intervals() {
        writeln!(w, "{s:.6} {e:.6}")?;
    }
    w.flush()?;
    Ok(())
}

/// Speech-only features plus the map back to original frame indices.
#[derive(Debug, Clone)]
pub struct SpeechFrames {
    pub features: FeatureMatrix,
    /// Original frame index of each retained frame, ascending.
    pub frame_map: Vec<usize>,
}

/// Keep the frames whose center time falls inside some speech mark.
pub fn apply_speech_marks(f: &FeatureMatrix, marks: &SpeechMarks) -> Result<SpeechFrames> {
    let span = f.span();
    if marks.end() > span + 1e-9 {
        return Err(Error::Parameter(format!(
            "speech marks end at {:.3}s but audio spans {:.3}s",
            marks.end(),
            span
        )));
    }
    let shift = f.frame_shift();
    let mut rows = Vec::new();
    let mut frame_map = Vec::new();
    for i in 0..f.frames() {
        let center = (i as f64 + 0.5) * shift;
        if marks.contains(center) {
            rows.extend(f.frame(i).iter().copied());
            frame_map.push(i);
        }
    }
    let data = Array2::from_shape_vec((frame_map.len(), f.dim()), rows)
        .expect("row extraction preserves dim");
    Ok(SpeechFrames {
        features: FeatureMatrix::new_allow_empty(data, f.frame_shift_us())?,
        frame_map,
    })
}

/// Uniform segmentation of the speech frames into fixed-length segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentGrid {
    seg_len: usize,
    speech_frames: usize,
}

impl SegmentGrid {
    pub fn new(speech_frames: usize, seg_len: usize) -> Result<Self> {
        if seg_len == 0 {
            return Err(Error::Parameter("seg_len must be >= 1".into()));
        }
        Ok(SegmentGrid { seg_len, speech_frames })
    }

    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn speech_frames(&self) -> usize {
        self.speech_frames
    }

    /// Number of segments M = ceil(speech_frames / seg_len).
    pub fn segments(&self) -> usize {
        self.speech_frames.div_ceil(self.seg_len)
    }

    pub fn segment_of(&self, frame: usize) -> usize {
        debug_assert!(frame < self.speech_frames);
        frame / self.seg_len
    }

    /// Frame range of segment m; the last segment may be short.
    pub fn frames_of(&self, m: usize) -> Range<usize> {
        let start = m * self.seg_len;
        let end = ((m + 1) * self.seg_len).min(self.speech_frames);
        start..end
    }
}

pub fn make_grid(speech_frames: usize, seg_len: usize) -> Result<SegmentGrid> {
    SegmentGrid::new(speech_frames, seg_len)
}

/// One reference interval: who spoke from start to end (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInterval {
    pub start: f64,
    pub end: f64,
    pub speaker: String,
}

/// Ground-truth speaker labels; intervals may overlap.
pub type ReferenceLabels = Vec<LabeledInterval>;
