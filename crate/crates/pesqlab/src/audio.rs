//! Waveform I/O: RIFF/WAVE reading and writing, pair manifests, pair validation.
//!
//! Mono PCM-16 and IEEE float-32 only. Integer samples are normalized by full
//! scale on load so that everything downstream works on dimensionless
//! amplitudes in a nominal `[-1, 1]` range.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Relative length mismatch tolerated by [`make_pair`] before erroring.
pub const PAIR_LENGTH_TOLERANCE: f64 = 0.005;

/// A mono waveform with its sample rate.
///
/// Samples are finite `f64` amplitudes; integer encodings are divided by full
/// scale on load. Values outside `[-1, 1]` are allowed (the click attack
/// relies on them) and only clamped when quantizing to PCM-16.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    /// Validates and wraps a sample buffer.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("waveform must be non-empty".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Argument(format!(
                "waveform sample {i} is not finite"
            )));
        }
        if sample_rate_hz != 8000 && sample_rate_hz != 16000 {
            return Err(Error::Argument(format!(
                "unsupported sample rate {sample_rate_hz} Hz (expected 8000 or 16000)"
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Largest absolute sample value.
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Replaces the sample buffer, keeping the sample rate. The new buffer is
    /// validated like in [`Waveform::new`].
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Waveform::new(samples, self.sample_rate_hz)
    }
}

/// Sample encoding for [`save_waveform`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// 16-bit signed integer PCM; samples clamped to `[-1, 1 - 2^-15]`.
    Pcm16,
    /// 32-bit IEEE float, stored as-is (f64 narrowed to f32).
    Float32,
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Encoding::Pcm16 => write!(f, "pcm16"),
            Encoding::Float32 => write!(f, "float32"),
        }
    }
}

/// A reference/degraded pair with equal length and sample rate.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub reference: Waveform,
    pub degraded: Waveform,
    pub id: String,
    pub warnings: Vec<String>,
}

impl UtterancePair {
    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.reference.sample_rate_hz()
    }

    /// Same pair with the degraded sample buffer replaced.
    pub fn with_degraded_samples(&self, samples: Vec<f64>) -> Result<Self> {
        let degraded = self.degraded.with_samples(samples)?;
        if degraded.len() != self.reference.len() {
            return Err(Error::Validation(format!(
                "replacement degraded length {} != reference length {}",
                degraded.len(),
                self.reference.len()
            )));
        }
        Ok(UtterancePair {
            reference: self.reference.clone(),
            degraded,
            id: self.id.clone(),
            warnings: self.warnings.clone(),
        })
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub reference_path: PathBuf,
    pub degraded_path: PathBuf,
}

/// A parsed pair manifest.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// WAV reading
// ---------------------------------------------------------------------------

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;
const FMT_EXTENSIBLE: u16 = 0xFFFE;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self, what: &str) -> Result<[u8; 4]> {
        let b = self.take(4, what)?;
        Ok([b[0], b[1], b[2], b[3]])
    }
}

struct FmtChunk {
    audio_format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Loads a mono PCM-16 or IEEE float-32 RIFF/WAVE file.
///
/// PCM-16 samples are divided by 32768; float samples are taken verbatim.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Decodes WAV bytes; split out so tests can poke at raw byte vectors.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut c = Cursor::new(bytes);
    let riff = c.tag("RIFF header")?;
    if &riff != b"RIFF" {
        return Err(Error::parse(0, "missing RIFF magic"));
    }
    let _riff_size = c.u32("RIFF size")?;
    let wave = c.tag("WAVE tag")?;
    if &wave != b"WAVE" {
        return Err(Error::parse(8, "missing WAVE tag"));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<(&[u8], u64)> = None;

    while c.pos < bytes.len() {
        let chunk_start = c.pos as u64;
        let id = c.tag("chunk id")?;
        let size = c.u32("chunk size")? as usize;
        let body = c.take(size, "chunk body")?;
        // chunks are word-aligned; odd sizes carry one pad byte
        if size % 2 == 1 && c.pos < bytes.len() {
            c.pos += 1;
        }
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::parse(chunk_start, "fmt chunk shorter than 16 bytes"));
                }
                let mut fc = Cursor::new(body);
                fmt = Some(FmtChunk {
                    audio_format: fc.u16("audio format")?,
                    channels: fc.u16("channel count")?,
                    sample_rate: {
                        let sr = fc.u32("sample rate")?;
                        let _byte_rate = fc.u32("byte rate")?;
                        let _block_align = fc.u16("block align")?;
                        sr
                    },
                    bits_per_sample: fc.u16("bits per sample")?,
                });
            }
            b"data" => {
                if size == 0 {
                    return Err(Error::parse(chunk_start, "zero-length data chunk"));
                }
                data = Some((body, chunk_start + 8));
            }
            _ => {} // skip LIST, fact, ...
        }
    }

    let fmt = fmt.ok_or_else(|| Error::parse(12, "no fmt chunk"))?;
    let (data, data_offset) = data.ok_or_else(|| Error::parse(12, "no data chunk"))?;

    if fmt.channels != 1 {
        return Err(Error::format("channels", fmt.channels));
    }
    let format = if fmt.audio_format == FMT_EXTENSIBLE {
        // minimal WAVE_FORMAT_EXTENSIBLE support is out of scope
        return Err(Error::format("audio_format", "extensible (0xFFFE)"));
    } else {
        fmt.audio_format
    };

    let samples = match (format, fmt.bits_per_sample) {
        (FMT_PCM, 16) => {
            if data.len() % 2 != 0 {
                return Err(Error::parse(
                    data_offset + data.len() as u64,
                    "data chunk is not a whole number of 16-bit samples",
                ));
            }
            data.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                .collect()
        }
        (FMT_IEEE_FLOAT, 32) => {
            if data.len() % 4 != 0 {
                return Err(Error::parse(
                    data_offset + data.len() as u64,
                    "data chunk is not a whole number of 32-bit samples",
                ));
            }
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        }
        (FMT_PCM, bits) => return Err(Error::format("bits_per_sample", bits)),
        (FMT_IEEE_FLOAT, bits) => return Err(Error::format("bits_per_sample", bits)),
        (other, _) => return Err(Error::format("audio_format", other)),
    };

    Waveform::new(samples, fmt.sample_rate)
}

// ---------------------------------------------------------------------------
// WAV writing
// ---------------------------------------------------------------------------

/// Writes a waveform as a canonical mono RIFF/WAVE file.
pub fn save_waveform(w: &Waveform, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(w, encoding);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Encodes a waveform to WAV bytes.
pub fn encode_wav(w: &Waveform, encoding: Encoding) -> Vec<u8> {
    let (format, bits, data): (u16, u16, Vec<u8>) = match encoding {
        Encoding::Pcm16 => {
            let mut data = Vec::with_capacity(w.len() * 2);
            for &s in w.samples() {
                let clamped = s.clamp(-1.0, 1.0 - f64::powi(2.0, -15));
                let q = (clamped * 32768.0).round() as i16;
                data.extend_from_slice(&q.to_le_bytes());
            }
            (FMT_PCM, 16, data)
        }
        Encoding::Float32 => {
            let mut data = Vec::with_capacity(w.len() * 4);
            for &s in w.samples() {
                data.extend_from_slice(&(s as f32).to_le_bytes());
            }
            (FMT_IEEE_FLOAT, 32, data)
        }
    };

    let block_align = (bits / 8) as u32;
    let byte_rate = w.sample_rate_hz() * block_align;
    let mut out = Vec::with_capacity(44 + data.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&data);
    out
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Loads a CSV manifest with header `id,reference,degraded`.
///
/// `#`-prefixed lines are ignored; relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            ),
            _ => Error::Schema(e.to_string()),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("manifest is missing column `{name}`")))
    };
    let id_col = col("id")?;
    let ref_col = col("reference")?;
    let deg_col = col("degraded")?;

    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };

    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Schema(e.to_string()))?;
        let field = |i: usize, name: &str| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Schema(format!("row is missing `{name}` value")))
        };
        let id = field(id_col, "id")?.to_string();
        let reference = field(ref_col, "reference")?;
        let degraded = field(deg_col, "degraded")?;
        if id.is_empty() || reference.is_empty() || degraded.is_empty() {
            return Err(Error::Validation(format!(
                "manifest row with id `{id}` has an empty field"
            )));
        }
        entries.push(ManifestEntry {
            id,
            reference_path: resolve(reference),
            degraded_path: resolve(degraded),
        });
    }

    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate manifest id `{}`",
                e.id
            )));
        }
    }

    Ok(Manifest { entries })
}

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

/// Builds a length-matched pair from two waveforms.
///
/// Lengths differing by at most [`PAIR_LENGTH_TOLERANCE`] of the longer
/// waveform are reconciled by truncating the longer one, recording a warning.
/// Larger mismatches and sample-rate mismatches are errors.
pub fn make_pair(reference: Waveform, degraded: Waveform, id: impl Into<String>) -> Result<UtterancePair> {
    let id = id.into();
    if reference.sample_rate_hz() != degraded.sample_rate_hz() {
        return Err(Error::Validation(format!(
            "sample-rate mismatch for `{id}`: reference {} Hz vs degraded {} Hz",
            reference.sample_rate_hz(),
            degraded.sample_rate_hz()
        )));
    }

    let (nr, nd) = (reference.len(), degraded.len());
    let mut warnings = Vec::new();
    let (reference, degraded) = if nr == nd {
        (reference, degraded)
    } else {
        let longer = nr.max(nd);
        let shorter = nr.min(nd);
        let rel = (longer - shorter) as f64 / longer as f64;
        if rel > PAIR_LENGTH_TOLERANCE {
            return Err(Error::Validation(format!(
                "length mismatch for `{id}`: {nr} vs {nd} samples ({:.2}% > {:.2}%)",
                rel * 100.0,
                PAIR_LENGTH_TOLERANCE * 100.0
            )));
        }
        warnings.push(format!(
            "lengths {nr} vs {nd} differ by {:.3}%; truncated to {shorter} samples",
            rel * 100.0
        ));
        let trunc = |w: Waveform| -> Result<Waveform> {
            if w.len() == shorter {
                Ok(w)
            } else {
                let mut s = w.samples().to_vec();
                s.truncate(shorter);
                w.with_samples(s)
            }
        };
        (trunc(reference)?, trunc(degraded)?)
    };

    Ok(UtterancePair {
        reference,
        degraded,
        id,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, rate: u32) -> Waveform {
        let samples = (0..n)
            .map(|i| (i as f64 * 0.01).sin() * 0.5)
            .collect::<Vec<_>>();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn pcm16_normalizes_by_full_scale() {
        let w = Waveform::new(vec![0.0; 4], 16000).unwrap();
        let mut bytes = encode_wav(&w, Encoding::Pcm16);
        // overwrite first sample with 16384
        let data_start = bytes.len() - 8;
        bytes[data_start..data_start + 2].copy_from_slice(&16384i16.to_le_bytes());
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples()[0], 0.5);
    }

    #[test]
    fn zero_length_data_chunk_is_a_parse_error() {
        let w = Waveform::new(vec![0.1], 16000).unwrap();
        let mut bytes = encode_wav(&w, Encoding::Pcm16);
        // truncate data to zero and fix the recorded size
        bytes.truncate(44);
        let len = 0u32.to_le_bytes();
        bytes[40..44].copy_from_slice(&len);
        bytes[4..8].copy_from_slice(&36u32.to_le_bytes());
        match decode_wav(&bytes) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("zero-length")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let w = tone(32, 16000);
        let bytes = encode_wav(&w, Encoding::Float32);
        let cut = &bytes[..bytes.len() - 7];
        match decode_wav(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pcm16_clamps_out_of_range() {
        let w = Waveform::new(vec![2.0, -3.0], 16000).unwrap();
        let back = decode_wav(&encode_wav(&w, Encoding::Pcm16)).unwrap();
        assert_eq!(back.samples()[0], 32767.0 / 32768.0);
        assert_eq!(back.samples()[1], -1.0);
    }

    #[test]
    fn pcm16_exact_values_round_trip() {
        let w = Waveform::new(vec![-0.25, 0.5, 0.0], 16000).unwrap();
        let back = decode_wav(&encode_wav(&w, Encoding::Pcm16)).unwrap();
        assert_eq!(back.samples(), &[-0.25, 0.5, 0.0]);
    }

    #[test]
    fn stereo_is_rejected_with_field_name() {
        let w = tone(16, 16000);
        let mut bytes = encode_wav(&w, Encoding::Pcm16);
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        match decode_wav(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_encoding_is_rejected() {
        let w = tone(16, 16000);
        let mut bytes = encode_wav(&w, Encoding::Pcm16);
        bytes[20..22].copy_from_slice(&7u16.to_le_bytes()); // mu-law
        match decode_wav(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "audio_format"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn float32_round_trip_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..2000);
            let samples: Vec<f64> = (0..n)
                .map(|_| rng.random_range(-1.0f32..1.0) as f64)
                .collect();
            let w = Waveform::new(samples, 16000).unwrap();
            let back: Waveform = decode_wav(&encode_wav(&w, Encoding::Float32)).unwrap();
            assert_eq!(w.samples(), back.samples());
            assert_eq!(w.sample_rate_hz(), back.sample_rate_hz());
        }
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = tone(256, 16000);
        save_waveform(&w, &path, Encoding::Float32).unwrap();
        let back = load_waveform(&path).unwrap();
        assert_eq!(back.len(), 256);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let w = tone(16, 16000);
        match save_waveform(&w, "/nonexistent-dir/t.wav", Encoding::Pcm16) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected i/o error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_parses_rows_comments_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "id,reference,degraded\n# a comment line\na,clean/a.wav,noisy/a.wav\nb,/abs/b.wav,noisy/b.wav\n",
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].reference_path, dir.path().join("clean/a.wav"));
        assert_eq!(m.entries[1].reference_path, PathBuf::from("/abs/b.wav"));
    }

    #[test]
    fn manifest_duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "id,reference,degraded\np232_001,a.wav,b.wav\np232_001,c.wav,d.wav\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(Error::Validation(msg)) => assert!(msg.contains("p232_001")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "id,reference\na,b.wav\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Schema(msg)) => assert!(msg.contains("degraded")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn make_pair_equal_lengths_has_no_warning() {
        let p = make_pair(tone(1000, 16000), tone(1000, 16000), "x").unwrap();
        assert!(p.warnings.is_empty());
        assert_eq!(p.len(), 1000);
    }

    #[test]
    fn make_pair_truncates_small_mismatch() {
        let p = make_pair(tone(48000, 16000), tone(48100, 16000), "x").unwrap();
        assert_eq!(p.reference.len(), 48000);
        assert_eq!(p.degraded.len(), 48000);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn make_pair_rejects_large_mismatch_and_rate_mismatch() {
        assert!(matches!(
            make_pair(tone(1000, 16000), tone(1200, 16000), "x"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            make_pair(tone(1000, 8000), tone(1000, 16000), "x"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn make_pair_is_idempotent() {
        let p = make_pair(tone(48000, 16000), tone(48100, 16000), "x").unwrap();
        let again = make_pair(p.reference.clone(), p.degraded.clone(), "x").unwrap();
        assert_eq!(p.reference.samples(), again.reference.samples());
        assert_eq!(p.degraded.samples(), again.degraded.samples());
        assert!(again.warnings.is_empty());
    }
}
