//! Waveform files and corpus manifests.
//!
//! Only RIFF/WAVE, 16-bit linear PCM, one channel, 16 kHz is accepted.
//! Decoding divides by 32768. Encoding clamps to `[-1, 1]`, multiplies by
//! 32768, rounds half away from zero and saturates at `i16::MAX`, so that a
//! decode followed by an encode reproduces the PCM payload exactly.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f64 = 32768.0;

/// A mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::UnsupportedFormat("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// A clip at the corpus sample rate.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Elementwise `self + gain * other`.
    pub fn add_scaled(&self, other: &AudioClip, gain: f64) -> Result<AudioClip> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "clip lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a + gain * b)
            .collect();
        AudioClip::new(samples, self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn encode_sample(x: f64) -> i16 {
    let scaled = (x.clamp(-1.0, 1.0) * PCM_SCALE).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn map_hound_error(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            Error::UnsupportedFormat(format!("{}: {err}", path.display()))
        }
        other => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a mono 16-bit 16 kHz PCM file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    // open separately so that only a failure to open is an I/O error
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| map_hound_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, expected 1",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {}-bit {:?}, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound_error(path, e))?;
    AudioClip::new(samples, SAMPLE_RATE)
}

/// Encodes a clip to its 16-bit PCM payload.
pub fn encode_pcm(clip: &AudioClip) -> Vec<i16> {
    clip.samples.iter().map(|&s| encode_sample(s)).collect()
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "refusing to write {} Hz audio",
            clip.sample_rate
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for s in encode_pcm(clip) {
        writer.write_sample(s).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Clean,
    Noise,
    Noisy,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Clean, SourceKind::Noise, SourceKind::Noisy];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Clean => "clean",
            SourceKind::Noise => "noise",
            SourceKind::Noisy => "noisy",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(SourceKind::Clean),
            "noise" => Ok(SourceKind::Noise),
            "noisy" => Ok(SourceKind::Noisy),
            other => Err(Error::InvalidConfig(format!("unknown source kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: SourceKind,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Result of scanning a directory: the manifest plus every file that was
/// skipped, with the reason.
#[derive(Debug)]
pub struct ManifestScan {
    pub manifest: Manifest,
    pub skipped: Vec<(PathBuf, String)>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn of_kind(&self, kind: SourceKind) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }

    pub fn merge(manifests: impl IntoIterator<Item = Manifest>) -> Manifest {
        Manifest {
            entries: manifests.into_iter().flat_map(|m| m.entries).collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses a JSON-lines manifest. Relative paths are resolved against the
    /// manifest's directory.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::CorruptFile {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", lineno + 1),
                })?;
            let p = Path::new(&entry.path);
            if p.is_relative() {
                entry.path = base.join(p).to_string_lossy().into_owned();
            }
            entries.push(entry);
        }
        Ok(Manifest { entries })
    }
}

/// Scans `root` (non-recursively) for `.wav` files and records each valid one
/// under `kind`. Files that fail to parse are skipped and reported.
pub fn build_manifest(root: impl AsRef<Path>, kind: SourceKind) -> Result<ManifestScan> {
    let root = root.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();

    let mut manifest = Manifest::default();
    let mut skipped = Vec::new();
    for path in paths {
        match read_wav(&path) {
            Ok(clip) => manifest.entries.push(ManifestEntry {
                path: path.to_string_lossy().into_owned(),
                kind,
                duration_s: clip.duration_s(),
            }),
            Err(e @ (Error::UnsupportedFormat(_) | Error::CorruptFile { .. })) => {
                skipped.push((path, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ManifestScan { manifest, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pcm(path: &Path, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn pcm_payload(path: &Path) -> Vec<i16> {
        hound::WavReader::open(path)
            .unwrap()
            .into_samples::<i16>()
            .map(|s| s.unwrap())
            .collect()
    }

    #[test]
    fn zero_file_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_pcm(&p, &vec![0; 16000]);
        let clip = read_wav(&p).unwrap();
        assert_eq!(clip.len(), 16000);
        assert_eq!(clip.sample_rate(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn most_negative_sample_is_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        write_pcm(&p, &[-32768]);
        assert_eq!(read_wav(&p).unwrap().samples(), &[-1.0]);
    }

    #[test]
    fn encode_examples() {
        let enc = |v: Vec<f64>| encode_pcm(&AudioClip::from_samples(v).unwrap());
        assert_eq!(enc(vec![0.0, 0.0]), vec![0, 0]);
        assert_eq!(enc(vec![1.0]), vec![32767]);
        assert_eq!(enc(vec![2.0]), vec![32767]);
        assert_eq!(enc(vec![-2.0]), vec![-32768]);
        // half away from zero
        assert_eq!(enc(vec![0.5 / 32768.0, -0.5 / 32768.0]), vec![1, -1]);
    }

    #[test]
    fn rejects_wrong_formats() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [(2u16, 16u16, 16000u32), (1, 8, 16000), (1, 16, 8000)];
        for (i, (channels, bits, rate)) in cases.into_iter().enumerate() {
            let p = dir.path().join(format!("bad{i}.wav"));
            let spec = hound::WavSpec {
                channels,
                sample_rate: rate,
                bits_per_sample: bits,
                sample_format: hound::SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            for _ in 0..channels * 4 {
                if bits == 8 {
                    w.write_sample(0i8).unwrap();
                } else {
                    w.write_sample(0i16).unwrap();
                }
            }
            w.finalize().unwrap();
            assert!(
                matches!(read_wav(&p), Err(Error::UnsupportedFormat(_))),
                "case {i}"
            );
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_pcm(&p, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::CorruptFile { .. })));
        fs::write(&p, b"RIFF\x10\x00\x00\x00garbage").unwrap();
        assert!(matches!(read_wav(&p), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_wav("/nonexistent/definitely/not/here.wav"),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pcm_round_trip_is_bit_exact(payload in proptest::collection::vec(any::<i16>(), 1..2000)) {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.wav");
            let b = dir.path().join("b.wav");
            write_pcm(&a, &payload);
            write_wav(&read_wav(&a).unwrap(), &b).unwrap();
            prop_assert_eq!(pcm_payload(&b), payload);
        }
    }

    #[test]
    fn manifest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let scan = build_manifest(dir.path(), SourceKind::Clean).unwrap();
        assert!(scan.manifest.is_empty());
        assert!(scan.skipped.is_empty());

        for name in ["c.wav", "a.wav", "b.wav"] {
            write_pcm(&dir.path().join(name), &vec![7; 1600]);
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let scan = build_manifest(dir.path(), SourceKind::Noise).unwrap();
        let names: Vec<_> = scan
            .manifest
            .entries
            .iter()
            .map(|e| Path::new(&e.path).file_name().unwrap().to_str().unwrap().to_owned())
            .collect();
        assert_eq!(names, ["a.wav", "b.wav", "c.wav"]);
        assert!(scan.manifest.entries.iter().all(|e| e.kind == SourceKind::Noise));
        assert!((scan.manifest.entries[0].duration_s - 0.1).abs() < 1.0 / 16000.0);

        fs::write(dir.path().join("c.wav"), b"RIFFjunk").unwrap();
        let scan = build_manifest(dir.path(), SourceKind::Noise).unwrap();
        assert_eq!(scan.manifest.len(), 2);
        assert_eq!(scan.skipped.len(), 1);
    }

    #[test]
    fn manifest_is_deterministic_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_pcm(&dir.path().join(format!("f{i}.wav")), &vec![i as i16; 320 * (i + 1)]);
        }
        let a = build_manifest(dir.path(), SourceKind::Noisy).unwrap().manifest;
        let b = build_manifest(dir.path(), SourceKind::Noisy).unwrap().manifest;
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let mp = dir.path().join("m.jsonl");
        a.write_jsonl(&mp).unwrap();
        assert_eq!(Manifest::read_jsonl(&mp).unwrap(), a);
        let line = a.to_jsonl().lines().next().unwrap().to_owned();
        assert!(line.starts_with("{\"path\":"));
        assert!(line.contains("\"kind\":\"noisy\""));
    }
}
