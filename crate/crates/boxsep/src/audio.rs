//! Time-frequency transforms, mixture construction, target binary masks,
//! and mask application / reconstruction.
//!
//! The STFT uses centered frames (the signal is zero-padded by half a window
//! on each side) with a periodic Hann window. The inverse uses weighted
//! overlap-add: each inverse-transformed frame is windowed again and the
//! result is normalized by the running sum of squared windows, which makes
//! the round trip exact up to floating-point error for any hop not larger
//! than half the window.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

/// Errors from audio I/O and transform configuration.
#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("invalid stft config: {0}")]
    BadConfig(String),
    #[error("clips are incompatible: {0}")]
    MismatchedClips(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported wave file: {0}")]
    BadWav(String),
    #[error("bad array file: {0}")]
    BadNpy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fixed-length mono audio clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Root-mean-square level of the clip.
    pub fn rms(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        ((e / self.samples.len() as f64) as f32).sqrt()
    }
}

/// Samplewise sum of two clips. No normalization is applied; the mixture may
/// exceed [-1, 1] in the float domain.
pub fn mix(r1: &AudioClip, r2: &AudioClip) -> Result<AudioClip, AudioError> {
    if r1.sample_rate != r2.sample_rate {
        return Err(AudioError::MismatchedClips(format!(
            "sample rates {} vs {}",
            r1.sample_rate, r2.sample_rate
        )));
    }
    if r1.len() != r2.len() {
        return Err(AudioError::MismatchedClips(format!(
            "lengths {} vs {}",
            r1.len(),
            r2.len()
        )));
    }
    let samples = r1
        .samples
        .iter()
        .zip(&r2.samples)
        .map(|(a, b)| a + b)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: r1.sample_rate,
    })
}

/// STFT framing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
}

impl StftConfig {
    /// Number of frequency bins (window_len / 2 + 1).
    pub fn freq_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Number of frames produced for a clip of `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples / self.hop + 1
    }

    /// Clip length whose last frame center lands exactly on the final hop:
    /// the natural clip size for a target frame count.
    pub fn frames_to_samples(&self, frames: usize) -> usize {
        (frames - 1) * self.hop
    }
}

/// Periodic Hann window of length `n`.
fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Magnitude + phase representation of a clip.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// `[freq_bins, frames]`, nonnegative.
    pub magnitude: Array2<f32>,
    /// `[freq_bins, frames]`, radians.
    pub phase: Array2<f32>,
    pub config: StftConfig,
    /// Original clip length, so the inverse can trim padding exactly.
    pub num_samples: usize,
}

/// A time-frequency mask with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Mask {
    pub values: Array2<f32>,
}

impl Mask {
    pub fn new(values: Array2<f32>) -> Self {
        debug_assert!(
            values.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "mask values must lie in [0, 1]"
        );
        Self { values }
    }
}

/// Forward/inverse STFT with a validated window/hop configuration.
pub struct Stft {
    config: StftConfig,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    ifft: Arc<dyn Fft<f32>>,
}

impl Stft {
    /// Validates the configuration (even window, hop in `[1, window/2]`,
    /// steady-state energy of the overlapped squared window positive at
    /// every hop residue) and plans the transforms.
    pub fn new(config: StftConfig) -> Result<Self, AudioError> {
        if config.window_len == 0 || config.window_len % 2 != 0 {
            return Err(AudioError::BadConfig(format!(
                "window_len must be even and positive, got {}",
                config.window_len
            )));
        }
        if config.hop == 0 || config.hop > config.window_len / 2 {
            return Err(AudioError::BadConfig(format!(
                "hop must be in [1, window_len/2], got hop {} for window {}",
                config.hop, config.window_len
            )));
        }
        let window = hann_window(config.window_len);
        // Weighted overlap-add divides by sum_j w[r + j*hop]^2; the inverse
        // only exists if that sum is bounded away from zero for every
        // residue r.
        for r in 0..config.hop {
            let mut acc = 0.0f32;
            let mut o = r;
            while o < config.window_len {
                acc += window[o] * window[o];
                o += config.hop;
            }
            if acc <= 1e-6 {
                return Err(AudioError::BadConfig(format!(
                    "window/hop combination leaves hop residue {r} uncovered"
                )));
            }
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(config.window_len);
        let ifft = planner.plan_fft_inverse(config.window_len);
        Ok(Self {
            config,
            window,
            fft,
            ifft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Forward transform with centered frames: frame `t` covers padded
    /// samples `[t*hop, t*hop + window)` where the padding is `window/2`
    /// zeros on each side.
    pub fn forward(&self, clip: &AudioClip) -> Spectrogram {
        let w = self.config.window_len;
        let hop = self.config.hop;
        let half = w / 2;
        let n = clip.len();
        let frames = self.config.num_frames(n);
        let bins = self.config.freq_bins();

        let mut padded = vec![0.0f32; n + 2 * half];
        padded[half..half + n].copy_from_slice(&clip.samples);

        let mut magnitude = Array2::<f32>::zeros((bins, frames));
        let mut phase = Array2::<f32>::zeros((bins, frames));
        let mut buf = vec![Complex32::new(0.0, 0.0); w];
        for t in 0..frames {
            let start = t * hop;
            for i in 0..w {
                buf[i] = Complex32::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for f in 0..bins {
                let c = buf[f];
                magnitude[[f, t]] = c.norm();
                phase[[f, t]] = c.im.atan2(c.re);
            }
        }
        Spectrogram {
            magnitude,
            phase,
            config: self.config,
            num_samples: n,
        }
    }

    /// Weighted overlap-add inverse. Rebuilds the full complex spectrum from
    /// the half-spectrum by conjugate symmetry, inverse-transforms, windows
    /// again, and normalizes by the running sum of squared windows.
    pub fn inverse(&self, spec: &Spectrogram) -> Result<AudioClip, AudioError> {
        if spec.config != self.config {
            return Err(AudioError::ShapeMismatch(
                "spectrogram was built with a different stft config".into(),
            ));
        }
        let w = self.config.window_len;
        let hop = self.config.hop;
        let half = w / 2;
        let bins = self.config.freq_bins();
        let (sb, frames) = (spec.magnitude.nrows(), spec.magnitude.ncols());
        if sb != bins || spec.phase.dim() != spec.magnitude.dim() {
            return Err(AudioError::ShapeMismatch(format!(
                "magnitude {}x{} does not match config with {} bins",
                sb, frames, bins
            )));
        }
        let n = spec.num_samples;
        let padded_len = n + 2 * half;
        let mut acc = vec![0.0f32; padded_len.max((frames - 1) * hop + w)];
        let mut wsum = vec![0.0f32; acc.len()];
        let scale = 1.0 / w as f32; // rustfft leaves the inverse unscaled
        let mut buf = vec![Complex32::new(0.0, 0.0); w];
        for t in 0..frames {
            for f in 0..bins {
                let (m, p) = (spec.magnitude[[f, t]], spec.phase[[f, t]]);
                buf[f] = Complex32::new(m * p.cos(), m * p.sin());
            }
            for f in bins..w {
                buf[f] = buf[w - f].conj();
            }
            self.ifft.process(&mut buf);
            let start = t * hop;
            for i in 0..w {
                let s = buf[i].re * scale;
                acc[start + i] += s * self.window[i];
                wsum[start + i] += self.window[i] * self.window[i];
            }
        }
        let mut samples = vec![0.0f32; n];
        for i in 0..n {
            let p = half + i;
            if wsum[p] > 1e-8 {
                samples[i] = acc[p] / wsum[p];
            }
        }
        Ok(AudioClip {
            samples,
            sample_rate: self.config.sample_rate,
        })
    }
}

/// Per-pixel binary targets: a cell belongs to source 1 when its share of
/// the summed magnitude strictly exceeds one half. Ties and silent cells
/// (zero denominator) yield zero in both masks.
pub fn binary_target_masks(s1: &Spectrogram, s2: &Spectrogram) -> Result<(Mask, Mask), AudioError> {
    if s1.magnitude.dim() != s2.magnitude.dim() {
        return Err(AudioError::ShapeMismatch(format!(
            "spectrogram dims {:?} vs {:?}",
            s1.magnitude.dim(),
            s2.magnitude.dim()
        )));
    }
    let (f, t) = s1.magnitude.dim();
    let mut m1 = Array2::<f32>::zeros((f, t));
    let mut m2 = Array2::<f32>::zeros((f, t));
    for i in 0..f {
        for j in 0..t {
            let a = s1.magnitude[[i, j]];
            let b = s2.magnitude[[i, j]];
            let denom = a + b;
            if denom > 0.0 {
                if a / denom > 0.5 {
                    m1[[i, j]] = 1.0;
                } else if b / denom > 0.5 {
                    m2[[i, j]] = 1.0;
                }
            }
        }
    }
    Ok((Mask::new(m1), Mask::new(m2)))
}

/// Multiplies the mask into the magnitude, keeps the input phase, and
/// inverts. The mask shape must match the spectrogram.
pub fn apply_mask_reconstruct(
    stft: &Stft,
    spec_in: &Spectrogram,
    mask: &Mask,
) -> Result<AudioClip, AudioError> {
    if mask.values.dim() != spec_in.magnitude.dim() {
        return Err(AudioError::ShapeMismatch(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.values.dim(),
            spec_in.magnitude.dim()
        )));
    }
    let masked = Spectrogram {
        magnitude: &spec_in.magnitude * &mask.values,
        phase: spec_in.phase.clone(),
        config: spec_in.config,
        num_samples: spec_in.num_samples,
    };
    stft.inverse(&masked)
}

/// Dynamic-range compression used for the network input: `ln(1 + m)`.
/// Masks are always applied to the linear magnitude, never to this.
pub fn compress_magnitude(mag: &Array2<f32>) -> Array2<f32> {
    mag.mapv(f32::ln_1p)
}

/// Resamples a clip to `target_sr` by linear interpolation. Adequate for
/// loading externally recorded audio; synthetic audio is generated at the
/// configured rate directly.
pub fn resample_linear(clip: &AudioClip, target_sr: u32) -> AudioClip {
    if clip.sample_rate == target_sr || clip.samples.is_empty() {
        return AudioClip {
            samples: clip.samples.clone(),
            sample_rate: target_sr,
        };
    }
    let src_len = clip.samples.len();
    let out_len =
        ((src_len as u64 * target_sr as u64) / clip.sample_rate as u64).max(1) as usize;
    let step = clip.sample_rate as f64 / target_sr as f64;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let k = pos as usize;
            if k + 1 >= src_len {
                clip.samples[src_len - 1]
            } else {
                let frac = (pos - k as f64) as f32;
                clip.samples[k] * (1.0 - frac) + clip.samples[k + 1] * frac
            }
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: target_sr,
    }
}

// --- Wave file I/O (mono PCM16 / float32) ---------------------------------

/// Reads a mono wave file holding 16-bit PCM or 32-bit float samples.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let mut rd = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 12];
    rd.read_exact(&mut hdr)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(AudioError::BadWav("missing RIFF/WAVE header".into()));
    }
    let mut format: Option<(u16, u16, u32)> = None; // (audio_format, bits, rate)
    loop {
        let mut chunk_hdr = [0u8; 8];
        match rd.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id = &chunk_hdr[0..4];
        let size = u32::from_le_bytes(chunk_hdr[4..8].try_into().unwrap()) as usize;
        if id == b"fmt " {
            let mut fmt = vec![0u8; size];
            rd.read_exact(&mut fmt)?;
            if size < 16 {
                return Err(AudioError::BadWav("fmt chunk too short".into()));
            }
            let audio_format = u16::from_le_bytes(fmt[0..2].try_into().unwrap());
            let channels = u16::from_le_bytes(fmt[2..4].try_into().unwrap());
            let rate = u32::from_le_bytes(fmt[4..8].try_into().unwrap());
            let bits = u16::from_le_bytes(fmt[14..16].try_into().unwrap());
            if channels != 1 {
                return Err(AudioError::BadWav(format!(
                    "only mono is supported, file has {channels} channels"
                )));
            }
            format = Some((audio_format, bits, rate));
        } else if id == b"data" {
            let (audio_format, bits, rate) = format
                .ok_or_else(|| AudioError::BadWav("data chunk before fmt chunk".into()))?;
            let mut raw = vec![0u8; size];
            rd.read_exact(&mut raw)?;
            let samples = match (audio_format, bits) {
                (1, 16) => raw
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                    .collect(),
                (3, 32) => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
                other => {
                    return Err(AudioError::BadWav(format!(
                        "unsupported format/bits {:?}",
                        other
                    )))
                }
            };
            return Ok(AudioClip {
                samples,
                sample_rate: rate,
            });
        } else {
            // Skip unknown chunk (chunks are word-aligned).
            let skip = size + (size & 1);
            std::io::copy(&mut rd.by_ref().take(skip as u64), &mut std::io::sink())?;
        }
    }
    Err(AudioError::BadWav("no data chunk found".into()))
}

fn write_wav_header(
    out: &mut impl IoWrite,
    audio_format: u16,
    bits: u16,
    sample_rate: u32,
    data_len: usize,
) -> std::io::Result<()> {
    let byte_rate = sample_rate * (bits as u32 / 8);
    let block_align = bits / 8;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len as u32).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&audio_format.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&sample_rate.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&block_align.to_le_bytes())?;
    out.write_all(&bits.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&(data_len as u32).to_le_bytes())?;
    Ok(())
}

/// Writes a clip as mono 32-bit float samples.
pub fn write_wav_f32(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_wav_header(&mut out, 3, 32, clip.sample_rate, clip.len() * 4)?;
    for &s in &clip.samples {
        out.write_all(&s.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a clip as mono 16-bit PCM, clamping to [-1, 1).
pub fn write_wav_i16(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_wav_header(&mut out, 1, 16, clip.sample_rate, clip.len() * 2)?;
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0 - 1.0 / 32768.0) * 32768.0).round() as i16;
        out.write_all(&q.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

// --- Portable array dumps --------------------------------------------------

/// Writes a 2-D f32 array in the standard binary array format readable by
/// numpy and friends (version 1.0 header, little-endian f32, C order).
pub fn write_npy_2d(path: &Path, arr: &Array2<f32>) -> Result<(), AudioError> {
    let mut out = BufWriter::new(File::create(path)?);
    let (h, w) = arr.dim();
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({h}, {w}), }}"
    );
    // Pad the total header (magic 8 + len 2 + dict) to a multiple of 64,
    // ending in a newline.
    let total = 10 + header.len() + 1;
    let pad = (64 - total % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    out.write_all(b"\x93NUMPY\x01\x00")?;
    out.write_all(&(header.len() as u16).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    for v in arr.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads back a 2-D little-endian f32 array written by [`write_npy_2d`].
pub fn read_npy_2d(path: &Path) -> Result<Array2<f32>, AudioError> {
    let mut rd = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    rd.read_exact(&mut magic)?;
    if &magic[0..6] != b"\x93NUMPY" {
        return Err(AudioError::BadNpy("bad magic".into()));
    }
    let hlen = u16::from_le_bytes([magic[8], magic[9]]) as usize;
    let mut header = vec![0u8; hlen];
    rd.read_exact(&mut header)?;
    let header = String::from_utf8_lossy(&header);
    if !header.contains("'<f4'") || header.contains("'fortran_order': True") {
        return Err(AudioError::BadNpy(format!(
            "expected little-endian f32 C-order array, header: {header}"
        )));
    }
    let shape_part = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| AudioError::BadNpy("missing shape".into()))?;
    let dims: Vec<usize> = shape_part
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    if dims.len() != 2 {
        return Err(AudioError::BadNpy(format!(
            "expected a 2-D array, got shape ({shape_part})"
        )));
    }
    let (h, w) = (dims[0], dims[1]);
    let mut raw = vec![0u8; h * w * 4];
    rd.read_exact(&mut raw)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| AudioError::BadNpy(format!("shape/data mismatch: {e}")))
}

/// Framing metadata stored next to a spectrogram dump.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SpectrogramSidecar {
    pub sr: u32,
    pub window: usize,
    pub hop: usize,
}

/// Writes `<base>.npy` (magnitude) plus `<base>.json` framing metadata.
pub fn write_spectrogram_dump(base: &Path, spec: &Spectrogram) -> Result<(), AudioError> {
    write_npy_2d(&base.with_extension("npy"), &spec.magnitude)?;
    let sidecar = SpectrogramSidecar {
        sr: spec.config.sample_rate,
        window: spec.config.window_len,
        hop: spec.config.hop,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| AudioError::BadNpy(format!("sidecar encode: {e}")))?;
    std::fs::write(base.with_extension("json"), json)?;
    Ok(())
}
