//! Multichannel waveforms: WAV I/O, segment slicing and channel masking.
//!
//! 16-bit PCM is decoded by dividing by 32768, so `-32768` maps to exactly
//! `-1.0` and `32767` to `32767/32768`. Encoding rounds to the nearest step
//! and saturates at the integer limits.

use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{ensure, Error, Result};

const MAX_CHANNELS: usize = 64;

/// A `C × N` waveform with its sample rate and the microphone index of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelSignal {
    samples: Array2<f64>,
    sample_rate: u32,
    channel_ids: Vec<usize>,
}

/// Sample encoding used when writing WAV files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SampleEncoding {
    #[default]
    Pcm16,
    Float32,
}

impl MultichannelSignal {
    /// Builds a signal whose rows map to microphones `0..C`.
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        let ids = (0..samples.nrows()).collect();
        Self::with_channel_ids(samples, sample_rate, ids)
    }

    pub fn with_channel_ids(
        samples: Array2<f64>,
        sample_rate: u32,
        channel_ids: Vec<usize>,
    ) -> Result<Self> {
        ensure!(sample_rate > 0, Argument, "sample rate must be positive");
        ensure!(samples.nrows() >= 1, Argument, "signal needs at least one channel");
        ensure!(
            channel_ids.len() == samples.nrows(),
            Argument,
            "{} channel ids for {} rows",
            channel_ids.len(),
            samples.nrows()
        );
        let mut sorted = channel_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(
            sorted.len() == channel_ids.len(),
            Argument,
            "channel ids must be distinct: {channel_ids:?}"
        );
        Ok(MultichannelSignal {
            samples,
            sample_rate,
            channel_ids,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel_ids(&self) -> &[usize] {
        &self.channel_ids
    }

    pub fn num_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    /// Fails unless the signal is sampled at `rate` Hz; resampling is not provided.
    pub fn require_rate(&self, rate: u32) -> Result<()> {
        ensure!(
            self.sample_rate == rate,
            Argument,
            "stage requires {rate} Hz input, got {} Hz",
            self.sample_rate
        );
        Ok(())
    }
}

/// Reads a 16-bit PCM or 32-bit float RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelSignal> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    ensure!(
        (1..=MAX_CHANNELS).contains(&channels),
        Format,
        "{channels} channels (supported: 1..={MAX_CHANNELS})"
    );
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedCodec(format!(
                "{bits}-bit {fmt:?} samples (supported: 16-bit PCM, 32-bit float)"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, frames), |(c, n)| interleaved[n * channels + c]);
    MultichannelSignal::new(samples, spec.sample_rate)
}

/// Writes the signal interleaved, row `i` becoming file channel `i`.
pub fn write_wav(
    signal: &MultichannelSignal,
    path: impl AsRef<Path>,
    encoding: SampleEncoding,
) -> Result<()> {
    let path = path.as_ref();
    ensure!(
        signal.samples.iter().all(|v| v.is_finite()),
        Argument,
        "cannot encode non-finite samples"
    );
    ensure!(
        signal.num_channels() <= MAX_CHANNELS,
        Argument,
        "at most {MAX_CHANNELS} channels can be written"
    );
    let spec = hound::WavSpec {
        channels: signal.num_channels() as u16,
        sample_rate: signal.sample_rate,
        bits_per_sample: match encoding {
            SampleEncoding::Pcm16 => 16,
            SampleEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            SampleEncoding::Pcm16 => hound::SampleFormat::Int,
            SampleEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for n in 0..signal.num_samples() {
        for c in 0..signal.num_channels() {
            let v = signal.samples[[c, n]];
            match encoding {
                SampleEncoding::Pcm16 => writer.write_sample(encode_pcm16(v)),
                SampleEncoding::Float32 => writer.write_sample(v as f32),
            }
            .map_err(|e| map_hound(path, e))?;
        }
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn encode_pcm16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // hound reports short reads as ErrorKind::Other.
        hound::Error::IoError(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other
            ) =>
        {
            Error::Format(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::UnsupportedCodec(format!("{}: unsupported WAV encoding", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Keeps the channels whose original microphone index is in `keep`.
///
/// Rows of the result follow ascending original index; dropped channels are
/// removed, not zero-filled.
pub fn mask_channels(signal: &MultichannelSignal, keep: &[usize]) -> Result<MultichannelSignal> {
    ensure!(!keep.is_empty(), Argument, "keep set is empty");
    let mut wanted = keep.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let mut rows = Vec::with_capacity(wanted.len());
    for id in &wanted {
        let row = signal
            .channel_ids
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "channel {id} not present (have {:?})",
                    signal.channel_ids
                ))
            })?;
        rows.push((*id, row));
    }
    rows.sort_unstable();
    let samples = signal
        .samples
        .select(ndarray::Axis(0), &rows.iter().map(|(_, r)| *r).collect::<Vec<_>>());
    MultichannelSignal::with_channel_ids(samples, signal.sample_rate, wanted)
}

/// Copies `round(dur_s · rate)` samples starting at `round(start_s · rate)`.
pub fn slice_segment(
    signal: &MultichannelSignal,
    start_s: f64,
    dur_s: f64,
) -> Result<MultichannelSignal> {
    ensure!(
        start_s.is_finite() && dur_s.is_finite() && start_s >= 0.0 && dur_s > 0.0,
        Range,
        "invalid window start {start_s} s, duration {dur_s} s"
    );
    let rate = signal.sample_rate as f64;
    let start = (start_s * rate).round() as usize;
    let len = (dur_s * rate).round() as usize;
    ensure!(
        start + len <= signal.num_samples(),
        Range,
        "window [{start_s}, {}) s exceeds signal length {} s",
        start_s + dur_s,
        signal.duration_s()
    );
    let samples = signal.samples.slice(s![.., start..start + len]).to_owned();
    MultichannelSignal::with_channel_ids(samples, signal.sample_rate, signal.channel_ids.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(c: usize, n: usize, seed: u64) -> MultichannelSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((c, n), |_| rng.gen_range(-1.0..1.0));
        MultichannelSignal::new(a, 16000).unwrap()
    }

    #[test]
    fn wav_header_echo_and_mono() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let sig = MultichannelSignal::new(Array2::zeros((8, 32000)), 16000).unwrap();
        write_wav(&sig, &p, SampleEncoding::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!((back.num_channels(), back.num_samples(), back.sample_rate()), (8, 32000, 16000));
        assert_eq!(back, sig, "zero signal round-trips exactly");

        let mono = random_signal(1, 100, 3);
        write_wav(&mono, &p, SampleEncoding::Pcm16).unwrap();
        assert_eq!(read_wav(&p).unwrap().channel_ids(), &[0]);
    }

    #[test]
    fn pcm16_scaling_convention() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for v in [32767i16, -32768, 0, 1] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let s = read_wav(&p).unwrap();
        let row: Vec<f64> = s.samples().row(0).to_vec();
        assert_eq!(row, vec![32767.0 / 32768.0, -1.0, 0.0, 1.0 / 32768.0]);
        // And the encoder maps those amplitudes back to the same integers.
        write_wav(&s, &p, SampleEncoding::Pcm16).unwrap();
        assert_eq!(read_wav(&p).unwrap(), s);
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let sig = random_signal(4, 5000, 7);
        write_wav(&sig, &p, SampleEncoding::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        let err = (back.samples() - sig.samples())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 2f64.powi(-15), "max error {err}");
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let sig = random_signal(3, 1000, 8);
        let as_f32 = sig.samples().mapv(|v| v as f32 as f64);
        let sig = MultichannelSignal::new(as_f32, 16000).unwrap();
        write_wav(&sig, &p, SampleEncoding::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), sig);
    }

    #[test]
    fn wav_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF\x00\x00\x00\x00WAVEjunk").unwrap();
        let e = read_wav(&bad);
        assert!(matches!(e, Err(Error::Format(_))), "{e:?}");

        let p24 = dir.path().join("24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p24, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p24), Err(Error::UnsupportedCodec(_))));

        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));
        let sig = random_signal(1, 10, 1);
        assert!(matches!(
            write_wav(&sig, dir.path().join("no/such/dir.wav"), SampleEncoding::Pcm16),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_examples() {
        let sig = random_signal(8, 50, 2);
        assert_eq!(mask_channels(&sig, &(0..8).collect::<Vec<_>>()).unwrap(), sig);
        let m = mask_channels(&sig, &[6, 0, 4, 2]).unwrap();
        assert_eq!(m.channel_ids(), &[0, 2, 4, 6]);
        assert_eq!(m.samples().row(1), sig.samples().row(2));
        assert!(matches!(mask_channels(&sig, &[9]), Err(Error::Argument(_))));
        assert!(matches!(mask_channels(&sig, &[]), Err(Error::Argument(_))));
        // ids refer to original microphones, so a second mask uses them too.
        let mm = mask_channels(&m, &[4, 6]).unwrap();
        assert_eq!(mm.samples().row(0), sig.samples().row(4));
        assert!(mask_channels(&m, &[1]).is_err());
    }

    #[test]
    fn slice_examples() {
        let sig = random_signal(2, 40000, 4);
        assert_eq!(slice_segment(&sig, 0.0, 2.0).unwrap().num_samples(), 32000);
        let s = slice_segment(&sig, 1.0, 0.5).unwrap();
        assert_eq!(s.num_samples(), 8000);
        assert_eq!(s.samples()[[1, 0]], sig.samples()[[1, 16000]]);
        assert!(matches!(slice_segment(&sig, 2.0, 1.0), Err(Error::Range(_))));
    }

    proptest! {
        #[test]
        fn mask_is_idempotent_and_commutes_with_slicing(
            keep in proptest::collection::btree_set(0usize..6, 1..6),
            start in 0usize..50,
            len in 1usize..50,
        ) {
            let c = 6;
            // Sentinel rows identify channels after any reordering.
            let a = Array2::from_shape_fn((c, 100), |(ch, n)| ch as f64 * 1000.0 + n as f64);
            let sig = MultichannelSignal::new(a, 100).unwrap();
            let keep: Vec<usize> = keep.into_iter().collect();
            let once = mask_channels(&sig, &keep).unwrap();
            prop_assert_eq!(&mask_channels(&once, &keep).unwrap(), &once);
            for (row, id) in once.channel_ids().iter().enumerate() {
                prop_assert_eq!(once.samples()[[row, 0]], *id as f64 * 1000.0);
            }
            let (st, du) = (start as f64 / 100.0, len as f64 / 100.0);
            let a = slice_segment(&once, st, du).unwrap();
            let b = mask_channels(&slice_segment(&sig, st, du).unwrap(), &keep).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
