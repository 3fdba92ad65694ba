//! Binary telemetry trace format.
//!
//! All integers and floats are little-endian; floats are IEEE-754 `f32`.
//!
//! Header (32 bytes):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `GWAT`                           |
//! | 4      | 2    | version (1)                            |
//! | 6      | 4    | latent dimension D                     |
//! | 10     | 4    | classes C                              |
//! | 14     | 8    | dataset size N                         |
//! | 22     | 4    | batch size b                           |
//! | 26     | 4    | steps per epoch K                      |
//! | 30     | 2    | flags (bit 0 bias present, bit 1 logits) |
//!
//! Step record:
//!
//! ```text
//! epoch u32 | step u32 | n u32 | weight tag u8 | weight hash u64
//! [tag 0: C×D f32 weights (row major) | C f32 bias if bias present]
//! n × ( sample_id u64 | D f32 latent | C f32 probs-or-logits | label u32 )
//! ```
//!
//! Tag 1 means the head is unchanged since the previous record; the hash
//! must then equal the previous record's hash. A record with `n = 0` only
//! carries a head snapshot (used to publish the weights after the final
//! update).
//!
//! Per-sample alignment rows (24 bytes each, no header):
//! `sample_id u64 | epoch u32 | step u32 | gamma f32 | grad_norm f32`,
//! with `gamma = NaN` for undefined scores.

use std::io::{self, Read, Write};

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::hash::weight_hash;
use crate::moments::MomentsError;
use crate::projection::ProjectionError;

pub const MAGIC: [u8; 4] = *b"GWAT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const FLAG_BIAS_PRESENT: u16 = 1 << 0;
pub const FLAG_PROBS_ARE_LOGITS: u16 = 1 << 1;
const WEIGHT_TAG_FULL: u8 = 0;
const WEIGHT_TAG_SAME: u8 = 1;
const RECORD_PREFIX_LEN: usize = 4 + 4 + 4 + 1 + 8;
/// Tolerance on `Σ probs = 1`.
pub const PROBS_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}")]
    VersionUnsupported(u16),
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("step ({epoch}, {step}) does not follow ({prev_epoch}, {prev_step})")]
    NonMonotonicStep {
        prev_epoch: u32,
        prev_step: u32,
        epoch: u32,
        step: u32,
    },
    #[error("truncated record starting at byte offset {offset}")]
    TruncatedRecord { offset: u64 },
    #[error("weight hash mismatch at ({epoch}, {step}): recorded {recorded:#018x}, actual {actual:#018x}")]
    HashMismatch {
        epoch: u32,
        step: u32,
        recorded: u64,
        actual: u64,
    },
    #[error("record ({epoch}, {step}) reuses weights but no snapshot precedes it")]
    MissingSnapshot { epoch: u32, step: u32 },
    #[error("unknown weight section tag {0}")]
    InvalidWeightTag(u8),
    #[error("batch of {n} samples exceeds batch size {batch_size}")]
    BatchTooLarge { n: usize, batch_size: u32 },
    #[error("label {label} of sample {sample_id} out of range")]
    InvalidLabel { sample_id: u64, label: u32 },
    #[error("probabilities of sample {sample_id} are not a distribution")]
    InvalidProbabilities { sample_id: u64 },
    #[error("no snapshot available as {what} reference for epoch {epoch}")]
    MissingReference { epoch: u32, what: &'static str },
    #[error("streaming and stored moments disagree in epoch {epoch} (order {order})")]
    MomentCrossCheck { epoch: u32, order: u8 },
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Moments(#[from] MomentsError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub latent_dim: u32,
    pub classes: u32,
    pub dataset_size: u64,
    pub batch_size: u32,
    pub steps_per_epoch: u32,
    pub flags: u16,
}

impl TraceHeader {
    pub fn bias_present(&self) -> bool {
        self.flags & FLAG_BIAS_PRESENT != 0
    }

    pub fn probs_are_logits(&self) -> bool {
        self.flags & FLAG_PROBS_ARE_LOGITS != 0
    }

    fn validate(&self) -> Result<(), TraceError> {
        if self.latent_dim == 0 {
            return Err(TraceError::InvalidHeader("latent dimension is zero"));
        }
        if self.classes == 0 {
            return Err(TraceError::InvalidHeader("class count is zero"));
        }
        if self.batch_size == 0 {
            return Err(TraceError::InvalidHeader("batch size is zero"));
        }
        if self.steps_per_epoch == 0 {
            return Err(TraceError::InvalidHeader("steps per epoch is zero"));
        }
        if self.flags & !(FLAG_BIAS_PRESENT | FLAG_PROBS_ARE_LOGITS) != 0 {
            return Err(TraceError::InvalidHeader("unknown flag bits"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        LittleEndian::write_u16(&mut b[4..6], VERSION);
        LittleEndian::write_u32(&mut b[6..10], self.latent_dim);
        LittleEndian::write_u32(&mut b[10..14], self.classes);
        LittleEndian::write_u64(&mut b[14..22], self.dataset_size);
        LittleEndian::write_u32(&mut b[22..26], self.batch_size);
        LittleEndian::write_u32(&mut b[26..30], self.steps_per_epoch);
        LittleEndian::write_u16(&mut b[30..32], self.flags);
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_LEN]) -> Result<Self, TraceError> {
        let magic = [b[0], b[1], b[2], b[3]];
        if magic != MAGIC {
            return Err(TraceError::BadMagic(magic));
        }
        let version = LittleEndian::read_u16(&b[4..6]);
        if version != VERSION {
            return Err(TraceError::VersionUnsupported(version));
        }
        let header = Self {
            latent_dim: LittleEndian::read_u32(&b[6..10]),
            classes: LittleEndian::read_u32(&b[10..14]),
            dataset_size: LittleEndian::read_u64(&b[14..22]),
            batch_size: LittleEndian::read_u32(&b[22..26]),
            steps_per_epoch: LittleEndian::read_u32(&b[26..30]),
            flags: LittleEndian::read_u16(&b[30..32]),
        };
        header.validate()?;
        Ok(header)
    }

    fn sample_stride(&self) -> usize {
        8 + 4 * self.latent_dim as usize + 4 * self.classes as usize + 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSection {
    Full {
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
        hash: u64,
    },
    SameAsPrevious {
        hash: u64,
    },
}

impl WeightSection {
    pub fn hash(&self) -> u64 {
        match self {
            Self::Full { hash, .. } | Self::SameAsPrevious { hash } => *hash,
        }
    }
}

/// One parsed step record. Per-sample arrays are flat: `latents` is
/// `n × D`, `probs` is `n × C` (logits if the header says so).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: u32,
    pub step: u32,
    pub weights: WeightSection,
    pub sample_ids: Vec<u64>,
    pub latents: Vec<f32>,
    pub probs: Vec<f32>,
    pub labels: Vec<u32>,
}

impl StepRecord {
    fn empty() -> Self {
        Self {
            epoch: 0,
            step: 0,
            weights: WeightSection::SameAsPrevious { hash: 0 },
            sample_ids: Vec::new(),
            latents: Vec::new(),
            probs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Borrowed batch handed to [`TraceWriter::write_step`].
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub sample_ids: &'a [u64],
    pub latents: &'a [f32],
    pub probs: &'a [f32],
    pub labels: &'a [u32],
}

impl StepBatch<'_> {
    pub fn empty() -> StepBatch<'static> {
        StepBatch {
            sample_ids: &[],
            latents: &[],
            probs: &[],
            labels: &[],
        }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), TraceError> {
    if expected == found {
        Ok(())
    } else {
        Err(TraceError::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

fn check_order(prev: Option<(u32, u32)>, epoch: u32, step: u32) -> Result<(), TraceError> {
    match prev {
        Some((pe, ps)) if (epoch, step) <= (pe, ps) => Err(TraceError::NonMonotonicStep {
            prev_epoch: pe,
            prev_step: ps,
            epoch,
            step,
        }),
        _ => Ok(()),
    }
}

/// Writes a trace, deduplicating unchanged head snapshots.
pub struct TraceWriter<W: Write> {
    out: W,
    header: TraceHeader,
    last: Option<(u32, u32)>,
    last_weights: Option<(u64, Vec<f32>, Option<Vec<f32>>)>,
    buf: Vec<u8>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: TraceHeader) -> Result<Self, TraceError> {
        header.validate()?;
        out.write_all(&header.to_bytes())?;
        Ok(Self {
            out,
            header,
            last: None,
            last_weights: None,
            buf: Vec::new(),
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn write_step(
        &mut self,
        epoch: u32,
        step: u32,
        weights: &[f32],
        bias: Option<&[f32]>,
        batch: StepBatch<'_>,
    ) -> Result<(), TraceError> {
        let h = self.header;
        let (d, c) = (h.latent_dim as usize, h.classes as usize);
        check_order(self.last, epoch, step)?;
        check_len("head weights", c * d, weights.len())?;
        match (h.bias_present(), bias) {
            (true, Some(b)) => check_len("head bias", c, b.len())?,
            (true, None) => check_len("head bias", c, 0)?,
            (false, Some(b)) => check_len("head bias", 0, b.len())?,
            (false, None) => {}
        }
        let n = batch.sample_ids.len();
        if n > h.batch_size as usize {
            return Err(TraceError::BatchTooLarge {
                n,
                batch_size: h.batch_size,
            });
        }
        check_len("latents", n * d, batch.latents.len())?;
        check_len("probs", n * c, batch.probs.len())?;
        check_len("labels", n, batch.labels.len())?;

        let hash = weight_hash(weights, bias);
        let same = matches!(&self.last_weights,
            Some((lh, lw, lb)) if *lh == hash && lw.as_slice() == weights && lb.as_deref() == bias);

        let buf = &mut self.buf;
        buf.clear();
        buf.write_u32::<LittleEndian>(epoch)?;
        buf.write_u32::<LittleEndian>(step)?;
        buf.write_u32::<LittleEndian>(n as u32)?;
        if same {
            buf.write_u8(WEIGHT_TAG_SAME)?;
            buf.write_u64::<LittleEndian>(hash)?;
        } else {
            buf.write_u8(WEIGHT_TAG_FULL)?;
            buf.write_u64::<LittleEndian>(hash)?;
            for &w in weights.iter().chain(bias.unwrap_or(&[])) {
                buf.write_f32::<LittleEndian>(w)?;
            }
            self.last_weights = Some((hash, weights.to_vec(), bias.map(<[f32]>::to_vec)));
        }
        for i in 0..n {
            buf.write_u64::<LittleEndian>(batch.sample_ids[i])?;
            for &x in &batch.latents[i * d..(i + 1) * d] {
                buf.write_f32::<LittleEndian>(x)?;
            }
            for &p in &batch.probs[i * c..(i + 1) * c] {
                buf.write_f32::<LittleEndian>(p)?;
            }
            buf.write_u32::<LittleEndian>(batch.labels[i])?;
        }
        self.out.write_all(buf)?;
        self.last = Some((epoch, step));
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TraceError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, TraceError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Fills `buf` as far as the reader allows; returns the bytes read.
fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Streaming trace parser with framing and consistency checks.
pub struct TraceReader<R: Read> {
    input: R,
    header: TraceHeader,
    offset: u64,
    last: Option<(u32, u32)>,
    last_hash: Option<u64>,
    bytes: Vec<u8>,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut input: R) -> Result<Self, TraceError> {
        let mut b = [0u8; HEADER_LEN];
        let got = read_up_to(&mut input, &mut b)?;
        if got < 4 {
            if got == 0 {
                return Err(TraceError::TruncatedRecord { offset: 0 });
            }
            let mut magic = [0u8; 4];
            magic[..got].copy_from_slice(&b[..got]);
            if !MAGIC.starts_with(&magic[..got]) {
                return Err(TraceError::BadMagic(magic));
            }
            return Err(TraceError::TruncatedRecord { offset: 0 });
        }
        if b[0..4] != MAGIC {
            return Err(TraceError::BadMagic([b[0], b[1], b[2], b[3]]));
        }
        if got < HEADER_LEN {
            return Err(TraceError::TruncatedRecord { offset: 0 });
        }
        let header = TraceHeader::from_bytes(&b)?;
        Ok(Self {
            input,
            header,
            offset: HEADER_LEN as u64,
            last: None,
            last_hash: None,
            bytes: Vec::new(),
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn read_exact_or_truncated(&mut self, len: usize, start: u64) -> Result<(), TraceError> {
        self.bytes.resize(len, 0);
        let got = read_up_to(&mut self.input, &mut self.bytes)?;
        if got < len {
            return Err(TraceError::TruncatedRecord { offset: start });
        }
        self.offset += len as u64;
        Ok(())
    }

    /// Reads the next record into `rec`, reusing its buffers.
    /// Returns `Ok(false)` at a clean end of stream.
    pub fn read_step_into(&mut self, rec: &mut StepRecord) -> Result<bool, TraceError> {
        let start = self.offset;
        let mut prefix = [0u8; RECORD_PREFIX_LEN];
        let got = read_up_to(&mut self.input, &mut prefix)?;
        if got == 0 {
            return Ok(false);
        }
        if got < RECORD_PREFIX_LEN {
            return Err(TraceError::TruncatedRecord { offset: start });
        }
        self.offset += RECORD_PREFIX_LEN as u64;
        let mut p = &prefix[..];
        let epoch = p.read_u32::<LittleEndian>()?;
        let step = p.read_u32::<LittleEndian>()?;
        let n = p.read_u32::<LittleEndian>()? as usize;
        let tag = p.read_u8()?;
        let hash = p.read_u64::<LittleEndian>()?;

        check_order(self.last, epoch, step)?;
        let h = self.header;
        let (d, c) = (h.latent_dim as usize, h.classes as usize);
        if n > h.batch_size as usize {
            return Err(TraceError::BatchTooLarge {
                n,
                batch_size: h.batch_size,
            });
        }

        rec.epoch = epoch;
        rec.step = step;
        rec.weights = match tag {
            WEIGHT_TAG_FULL => {
                let bias_len = if h.bias_present() { c } else { 0 };
                self.read_exact_or_truncated(4 * (c * d + bias_len), start)?;
                let mut weights = vec![0f32; c * d];
                LittleEndian::read_f32_into(&self.bytes[..4 * c * d], &mut weights);
                let bias = h.bias_present().then(|| {
                    let mut b = vec![0f32; c];
                    LittleEndian::read_f32_into(&self.bytes[4 * c * d..], &mut b);
                    b
                });
                let actual = weight_hash(&weights, bias.as_deref());
                if actual != hash {
                    return Err(TraceError::HashMismatch {
                        epoch,
                        step,
                        recorded: hash,
                        actual,
                    });
                }
                WeightSection::Full {
                    weights,
                    bias,
                    hash,
                }
            }
            WEIGHT_TAG_SAME => match self.last_hash {
                None => return Err(TraceError::MissingSnapshot { epoch, step }),
                Some(prev) if prev != hash => {
                    return Err(TraceError::HashMismatch {
                        epoch,
                        step,
                        recorded: hash,
                        actual: prev,
                    })
                }
                Some(_) => WeightSection::SameAsPrevious { hash },
            },
            other => return Err(TraceError::InvalidWeightTag(other)),
        };

        let stride = h.sample_stride();
        self.read_exact_or_truncated(n * stride, start)?;
        rec.sample_ids.clear();
        rec.labels.clear();
        rec.latents.resize(n * d, 0.0);
        rec.probs.resize(n * c, 0.0);
        for i in 0..n {
            let s = &self.bytes[i * stride..(i + 1) * stride];
            let id = LittleEndian::read_u64(&s[0..8]);
            LittleEndian::read_f32_into(&s[8..8 + 4 * d], &mut rec.latents[i * d..(i + 1) * d]);
            LittleEndian::read_f32_into(
                &s[8 + 4 * d..8 + 4 * (d + c)],
                &mut rec.probs[i * c..(i + 1) * c],
            );
            let label = LittleEndian::read_u32(&s[stride - 4..]);
            if label as usize >= c {
                return Err(TraceError::InvalidLabel {
                    sample_id: id,
                    label,
                });
            }
            rec.sample_ids.push(id);
            rec.labels.push(label);
        }
        self.last = Some((epoch, step));
        self.last_hash = Some(hash);
        Ok(true)
    }

    pub fn next_step(&mut self) -> Result<Option<StepRecord>, TraceError> {
        let mut rec = StepRecord::empty();
        Ok(self.read_step_into(&mut rec)?.then_some(rec))
    }
}

/// One row of the per-sample alignment file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentRow {
    pub sample_id: u64,
    pub epoch: u32,
    pub step: u32,
    /// NaN when undefined.
    pub gamma: f32,
    pub grad_norm: f32,
}

pub const ALIGNMENT_ROW_LEN: usize = 24;

impl AlignmentRow {
    pub fn gamma(&self) -> Option<f32> {
        (!self.gamma.is_nan()).then_some(self.gamma)
    }

    pub fn write_to<W: Write + ?Sized>(&self, out: &mut W) -> io::Result<()> {
        let mut b = [0u8; ALIGNMENT_ROW_LEN];
        LittleEndian::write_u64(&mut b[0..8], self.sample_id);
        LittleEndian::write_u32(&mut b[8..12], self.epoch);
        LittleEndian::write_u32(&mut b[12..16], self.step);
        LittleEndian::write_f32(&mut b[16..20], self.gamma);
        LittleEndian::write_f32(&mut b[20..24], self.grad_norm);
        out.write_all(&b)
    }
}

pub fn read_alignment_rows<R: Read>(mut input: R) -> Result<Vec<AlignmentRow>, TraceError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % ALIGNMENT_ROW_LEN != 0 {
        let whole = bytes.len() / ALIGNMENT_ROW_LEN * ALIGNMENT_ROW_LEN;
        return Err(TraceError::TruncatedRecord {
            offset: whole as u64,
        });
    }
    Ok(bytes
        .chunks_exact(ALIGNMENT_ROW_LEN)
        .map(|b| AlignmentRow {
            sample_id: LittleEndian::read_u64(&b[0..8]),
            epoch: LittleEndian::read_u32(&b[8..12]),
            step: LittleEndian::read_u32(&b[12..16]),
            gamma: LittleEndian::read_f32(&b[16..20]),
            grad_norm: LittleEndian::read_f32(&b[20..24]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader {
            latent_dim: 2,
            classes: 2,
            dataset_size: 4,
            batch_size: 2,
            steps_per_epoch: 2,
            flags: 0,
        }
    }

    fn batch() -> (Vec<u64>, Vec<f32>, Vec<f32>, Vec<u32>) {
        (
            vec![10, 11],
            vec![1.0, 0.5, -0.25, 2.0],
            vec![0.75, 0.25, 0.5, 0.5],
            vec![0, 1],
        )
    }

    fn write(steps: &[(u32, u32, [f32; 4])]) -> Vec<u8> {
        let (ids, lat, probs, labels) = batch();
        let mut w = TraceWriter::new(Vec::new(), header()).unwrap();
        for (e, s, weights) in steps {
            w.write_step(
                *e,
                *s,
                weights,
                None,
                StepBatch {
                    sample_ids: &ids,
                    latents: &lat,
                    probs: &probs,
                    labels: &labels,
                },
            )
            .unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn header_is_32_bytes_and_round_trips() {
        let h = header();
        let bytes = h.to_bytes();
        assert_eq!(&bytes[..4], b"GWAT");
        assert_eq!(TraceHeader::from_bytes(&bytes).unwrap(), h);
        let file = write(&[]);
        assert_eq!(file.len(), HEADER_LEN);
        let mut r = TraceReader::new(&file[..]).unwrap();
        assert!(r.next_step().unwrap().is_none());
    }

    #[test]
    fn records_round_trip_with_dedup() {
        let w = [0.5, -1.0, 0.25, 2.0];
        let file = write(&[(0, 0, w), (0, 1, w), (1, 0, [0.0, 1.0, 1.0, 0.0])]);
        let mut r = TraceReader::new(&file[..]).unwrap();
        let a = r.next_step().unwrap().unwrap();
        let b = r.next_step().unwrap().unwrap();
        let c = r.next_step().unwrap().unwrap();
        assert!(r.next_step().unwrap().is_none());
        assert!(matches!(a.weights, WeightSection::Full { ref weights, .. } if weights == &w));
        assert_eq!(b.weights, WeightSection::SameAsPrevious { hash: a.weights.hash() });
        assert!(matches!(c.weights, WeightSection::Full { .. }));
        let (ids, lat, probs, labels) = batch();
        assert_eq!((a.sample_ids, a.latents, a.probs, a.labels), (ids, lat, probs, labels));
        let stride = 8 + 8 + 8 + 4;
        let full = RECORD_PREFIX_LEN + 16 + 2 * stride;
        let same = RECORD_PREFIX_LEN + 2 * stride;
        assert_eq!(file.len(), HEADER_LEN + 2 * full + same);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = header().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            TraceReader::new(&bytes[..]),
            Err(TraceError::BadMagic(_))
        ));
        let mut bytes = header().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            TraceReader::new(&bytes[..]),
            Err(TraceError::VersionUnsupported(2))
        ));
        let mut bytes = header().to_bytes();
        bytes[6..10].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            TraceReader::new(&bytes[..]),
            Err(TraceError::InvalidHeader(_))
        ));
        assert!(matches!(
            TraceReader::new(&b"GWA"[..]),
            Err(TraceError::TruncatedRecord { offset: 0 })
        ));
    }

    #[test]
    fn truncation_reports_record_offset() {
        let w = [0.5, -1.0, 0.25, 2.0];
        let file = write(&[(0, 0, w), (0, 1, [1.0; 4])]);
        let second = HEADER_LEN + RECORD_PREFIX_LEN + 16 + 2 * 28;
        for cut in [second + 1, second + RECORD_PREFIX_LEN + 3, file.len() - 1] {
            let mut r = TraceReader::new(&file[..cut]).unwrap();
            r.next_step().unwrap().unwrap();
            match r.next_step() {
                Err(TraceError::TruncatedRecord { offset }) => assert_eq!(offset, second as u64),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn non_monotonic_steps_rejected() {
        let w = [0.5, -1.0, 0.25, 2.0];
        let (ids, lat, probs, labels) = batch();
        let mut tw = TraceWriter::new(Vec::new(), header()).unwrap();
        let b = StepBatch {
            sample_ids: &ids,
            latents: &lat,
            probs: &probs,
            labels: &labels,
        };
        tw.write_step(1, 0, &w, None, b).unwrap();
        assert!(matches!(
            tw.write_step(0, 5, &w, None, b),
            Err(TraceError::NonMonotonicStep { .. })
        ));
        // Hand-craft the same violation on the read side.
        let mut file = write(&[(1, 0, w)]);
        let rec = file[HEADER_LEN..].to_vec();
        file.extend_from_slice(&rec);
        let mut r = TraceReader::new(&file[..]).unwrap();
        r.next_step().unwrap();
        assert!(matches!(
            r.next_step(),
            Err(TraceError::NonMonotonicStep { .. })
        ));
    }

    #[test]
    fn writer_shape_checks() {
        let mut tw = TraceWriter::new(Vec::new(), header()).unwrap();
        assert!(matches!(
            tw.write_step(0, 0, &[1.0; 3], None, StepBatch::empty()),
            Err(TraceError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            tw.write_step(0, 0, &[1.0; 4], Some(&[0.0, 0.0]), StepBatch::empty()),
            Err(TraceError::DimensionMismatch { .. })
        ));
        let ids = [1, 2, 3];
        assert!(matches!(
            tw.write_step(
                0,
                0,
                &[1.0; 4],
                None,
                StepBatch {
                    sample_ids: &ids,
                    latents: &[0.0; 6],
                    probs: &[0.5; 6],
                    labels: &[0; 3]
                }
            ),
            Err(TraceError::BatchTooLarge { n: 3, .. })
        ));
    }

    #[test]
    fn corrupted_weights_fail_hash_check() {
        let mut file = write(&[(0, 0, [0.5, -1.0, 0.25, 2.0])]);
        file[HEADER_LEN + RECORD_PREFIX_LEN] ^= 0x01;
        let mut r = TraceReader::new(&file[..]).unwrap();
        assert!(matches!(
            r.next_step(),
            Err(TraceError::HashMismatch { .. })
        ));
    }

    #[test]
    fn invalid_label_rejected() {
        let mut file = write(&[(0, 0, [0.5, -1.0, 0.25, 2.0])]);
        let n = file.len();
        file[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        let mut r = TraceReader::new(&file[..]).unwrap();
        assert!(matches!(
            r.next_step(),
            Err(TraceError::InvalidLabel { label: 7, .. })
        ));
    }

    #[test]
    fn alignment_rows_round_trip() {
        let rows = vec![
            AlignmentRow {
                sample_id: 3,
                epoch: 1,
                step: 2,
                gamma: -0.5,
                grad_norm: 0.25,
            },
            AlignmentRow {
                sample_id: 4,
                epoch: 1,
                step: 2,
                gamma: f32::NAN,
                grad_norm: 0.0,
            },
        ];
        let mut buf = Vec::new();
        for r in &rows {
            r.write_to(&mut buf).unwrap();
        }
        assert_eq!(buf.len(), 48);
        let back = read_alignment_rows(&buf[..]).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].gamma(), None);
        assert!(read_alignment_rows(&buf[..30]).is_err());
    }
}
