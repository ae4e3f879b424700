"""Audio ingestion, resampling, STFT features, and noise/reverb augmentation.

All audio is handled as float arrays shaped (channel, time) with samples in
[-1, 1]. Features follow the stacked magnitude/phase layout the models expect:
(2 * n_audio_channels, frame, bin) with magnitudes first, phases second.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import upfirdn

from .errors import (
    DegenerateInputError,
    FormatError,
    InputError,
    TruncatedFileError,
    UnsupportedError,
)

# STFT geometry: Hamming window of 512 samples at 50% overlap; the DC bin is
# dropped so the 256 remaining bins divide evenly through the 8*8*2 pooling.
WIN_LEN = 512
HOP = 256
N_BINS = WIN_LEN // 2

# Polyphase resampler: 64 taps per phase under a Kaiser window.
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.0

# Reverb impulse response: decay constant grows linearly with strength up to
# this many seconds; the IR is cut at 3 decay constants (-26 dB amplitude).
REVERB_MAX_DECAY_S = 0.3
REVERB_IR_DECAYS = 3.0


@dataclass
class AudioClip:
    """Multichannel time-domain audio.

    samples: float array (n_channels, n_samples), values in [-1, 1]
    sample_rate_hz: positive sampling rate
    """

    samples: np.ndarray
    sample_rate_hz: int

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz


@dataclass
class FeatureTensor:
    """Stacked per-channel magnitude/phase spectrogram frames.

    values: (n_feature_channels, n_frames, n_bins); channels 0..C-1 hold
    magnitudes, channels C..2C-1 the matching phases in (-pi, pi].
    """

    values: np.ndarray

    @property
    def n_feature_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_bins(self) -> int:
        return self.values.shape[2]


@dataclass
class AugmentSpec:
    """Parameters for one augmentation pass.

    kind: "awgn", "noise_file" or "reverb"
    snr_db: target signal-to-noise ratio for the noise kinds
    reverb_strength: 0..100, scales the IR decay time (0 = dry)
    rng_seed: seed for the augmentation's private RNG
    """

    kind: str
    snr_db: float = 0.0
    reverb_strength: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("awgn", "noise_file", "reverb"):
            raise InputError(f"unknown augmentation kind: {self.kind!r}")
        if not np.isfinite(self.snr_db):
            raise InputError("snr_db must be finite")
        if not 0.0 <= self.reverb_strength <= 100.0:
            raise InputError("reverb_strength must lie in [0, 100]")


# ---------------------------------------------------------------------------
# RIFF/WAVE I/O (PCM16, PCM24, float32; little-endian)
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file into an AudioClip.

    Supports PCM 16/24-bit and IEEE float32 with 1-8 channels. Integer
    samples are scaled by 1 / 2^(bits-1) so the output lies in [-1, 1);
    float samples are clipped to [-1, 1].
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise TruncatedFileError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise TruncatedFileError(f"{path}: data chunk truncated")
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or payload is None:
        raise TruncatedFileError(f"{path}: missing fmt or data chunk")

    audio_format, n_channels, rate, _, block_align, bits = fmt
    if not 1 <= n_channels <= 8:
        raise FormatError(f"{path}: unsupported channel count {n_channels}")
    if audio_format == 1 and bits == 16:
        flat = np.frombuffer(payload, dtype="<i2").astype(np.float32)
        flat /= 32768.0
    elif audio_format == 1 and bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8)
        raw = raw[: len(raw) - len(raw) % 3].reshape(-1, 3)
        ints = (
            raw[:, 0].astype(np.int32)
            | (raw[:, 1].astype(np.int32) << 8)
            | (raw[:, 2].astype(np.int32) << 16)
        )
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        flat = ints.astype(np.float32) / float(1 << 23)
    elif audio_format == 3 and bits == 32:
        flat = np.clip(np.frombuffer(payload, dtype="<f4"), -1.0, 1.0)
        flat = flat.astype(np.float32)
    else:
        raise FormatError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits})"
        )

    if block_align:
        expected = len(payload) // block_align * block_align
        if expected != len(payload):
            raise TruncatedFileError(f"{path}: data ends mid-frame")
    flat = flat[: len(flat) - len(flat) % n_channels]
    samples = flat.reshape(-1, n_channels).T.copy()
    return AudioClip(samples=samples, sample_rate_hz=rate)


def write_wav(path, clip: AudioClip, encoding: str = "float32") -> None:
    """Write an AudioClip as RIFF/WAVE ("pcm16", "pcm24" or "float32")."""
    x = np.asarray(clip.samples, dtype=np.float64)
    interleaved = x.T.reshape(-1)
    if encoding == "pcm16":
        ints = np.clip(np.round(interleaved * 32768.0), -32768, 32767)
        payload = ints.astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif encoding == "pcm24":
        ints = np.clip(np.round(interleaved * (1 << 23)), -(1 << 23), (1 << 23) - 1)
        ints = ints.astype(np.int64)
        buf = np.empty((len(ints), 3), dtype=np.uint8)
        buf[:, 0] = ints & 0xFF
        buf[:, 1] = (ints >> 8) & 0xFF
        buf[:, 2] = (ints >> 16) & 0xFF
        payload = buf.tobytes()
        audio_format, bits = 1, 24
    elif encoding == "float32":
        payload = interleaved.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise InputError(f"unknown encoding: {encoding!r}")

    n_channels = clip.n_channels
    block_align = n_channels * bits // 8
    byte_rate = clip.sample_rate_hz * block_align
    header = b"".join([
        b"RIFF",
        struct.pack("<I", 4 + 8 + 16 + 8 + len(payload)),
        b"WAVE",
        b"fmt ",
        struct.pack(
            "<IHHIIHH", 16, audio_format, n_channels,
            clip.sample_rate_hz, byte_rate, block_align, bits,
        ),
        b"data",
        struct.pack("<I", len(payload)),
    ])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _design_polyphase_filter(up: int, down: int) -> np.ndarray:
    """Windowed-sinc lowpass for an up/down polyphase stage.

    64 taps per phase, Kaiser window beta=8, cutoff at the tighter of the
    two Nyquist limits, unity passband gain after upsampling by `up`.
    """
    n_taps = RESAMPLE_TAPS_PER_PHASE * up
    half = (n_taps - 1) / 2.0
    t = np.arange(n_taps) - half
    cutoff = 1.0 / (2.0 * max(up, down))  # cycles per sample at the high rate
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * t)
    h *= np.kaiser(n_taps, RESAMPLE_KAISER_BETA)
    h *= up / np.sum(h)  # exact DC gain of `up` compensates the zero stuffing
    return h


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Downsample a clip with a windowed-sinc polyphase filter.

    Output length is floor(n * target / source). Upsampling is out of scope
    and raises UnsupportedError.
    """
    if target_hz <= 0:
        raise InputError("target_hz must be positive")
    if target_hz > clip.sample_rate_hz:
        raise UnsupportedError("upsampling is not supported")
    if target_hz == clip.sample_rate_hz:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)

    g = np.gcd(target_hz, clip.sample_rate_hz)
    up, down = target_hz // g, clip.sample_rate_hz // g
    h = _design_polyphase_filter(up, down)

    # Pre-pad the filter so its group delay is an integer number of output
    # samples, then cut that delay off the front.
    half_len = (len(h) - 1) // 2
    n_pre = (down - (half_len % down)) % down
    h = np.concatenate([np.zeros(n_pre), h])
    offset = (half_len + n_pre) // down

    n_out = clip.n_samples * up // down
    out = np.empty((clip.n_channels, n_out), dtype=np.float32)
    # Zero-pad the tail so the polyphase output covers every output index.
    pad = int(np.ceil(len(h) / up)) + 1
    for c in range(clip.n_channels):
        x = np.concatenate([clip.samples[c].astype(np.float64), np.zeros(pad)])
        y = upfirdn(h, x, up=up, down=down)
        out[c] = y[offset:offset + n_out].astype(np.float32)
    return AudioClip(samples=out, sample_rate_hz=target_hz)


# ---------------------------------------------------------------------------
# STFT features
# ---------------------------------------------------------------------------

def stft_features(clip: AudioClip, win_len: int = WIN_LEN, hop: int = HOP) -> FeatureTensor:
    """Extract stacked magnitude/phase spectrogram features.

    Per channel: Hamming-windowed frames at hop `hop`, one-sided FFT, DC bin
    dropped (bins 1..win_len/2 kept). Magnitudes for all channels come first,
    then the phases, giving 2 * n_channels feature channels. Phase of an
    exactly-zero cell is 0.
    """
    if clip.n_samples < win_len:
        raise InputError(
            f"clip has {clip.n_samples} samples; need at least {win_len}"
        )
    n_frames = 1 + (clip.n_samples - win_len) // hop
    n_bins = win_len // 2
    window = np.hamming(win_len).astype(np.float64)

    c = clip.n_channels
    values = np.empty((2 * c, n_frames, n_bins), dtype=np.float32)
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(win_len)[None, :]
    for ch in range(c):
        frames = clip.samples[ch][idx] * window
        spec = np.fft.rfft(frames, axis=1)[:, 1:n_bins + 1]
        values[ch] = np.abs(spec)
        values[c + ch] = np.angle(spec)
    return FeatureTensor(values=values)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """Standard normal samples via the Box-Muller transform."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]: keeps the log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n]


def add_noise(clip: AudioClip, spec: AugmentSpec, noise: AudioClip | None = None) -> AudioClip:
    """Mix noise into a clip at the SNR requested by `spec`.

    kind "awgn" draws white Gaussian noise from the spec's seed; kind
    "noise_file" tiles/truncates `noise` to the clip length. The noise is
    scaled so 10*log10(P_signal / P_noise) equals spec.snr_db over the
    whole clip.
    """
    if spec.kind not in ("awgn", "noise_file"):
        raise InputError(f"add_noise cannot apply kind {spec.kind!r}")
    x = clip.samples.astype(np.float64)
    p_signal = np.mean(x ** 2)
    if p_signal <= 0.0:
        raise DegenerateInputError("signal power is zero; SNR is undefined")

    if spec.kind == "awgn":
        rng = np.random.default_rng(spec.rng_seed)
        n = _box_muller(rng, x.size).reshape(x.shape)
    else:
        if noise is None:
            raise InputError("noise_file kind requires a noise clip")
        if noise.n_channels != clip.n_channels:
            raise InputError("noise channel count must match the signal")
        if noise.sample_rate_hz != clip.sample_rate_hz:
            raise InputError("noise sample rate must match the signal")
        reps = int(np.ceil(clip.n_samples / noise.n_samples))
        n = np.tile(noise.samples.astype(np.float64), (1, reps))[:, :clip.n_samples]

    p_noise = np.mean(n ** 2)
    if p_noise <= 0.0:
        raise DegenerateInputError("noise power is zero")
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
    return AudioClip(
        samples=(x + gain * n).astype(np.float32),
        sample_rate_hz=clip.sample_rate_hz,
    )


def make_reverb_ir(strength: float, sample_rate_hz: int, rng_seed: int = 0) -> np.ndarray:
    """Synthetic impulse response: exponentially decaying uniform noise.

    The decay constant is strength/100 * REVERB_MAX_DECAY_S seconds and the
    IR is truncated at REVERB_IR_DECAYS decay constants. Strength 0 gives a
    unit impulse. The direct-path sample is pinned to 1 and later samples
    stay strictly below 1, so the IR peak is exactly its first sample.
    """
    tau = strength / 100.0 * REVERB_MAX_DECAY_S
    n_ir = int(round(REVERB_IR_DECAYS * tau * sample_rate_hz))
    if n_ir < 1:
        return np.ones(1, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    t = np.arange(1, n_ir + 1) / sample_rate_hz
    tail = rng.uniform(-0.9, 0.9, n_ir) * np.exp(-t / tau)
    return np.concatenate([[1.0], tail])


def apply_reverb(clip: AudioClip, spec: AugmentSpec) -> AudioClip:
    """Convolve every channel with a shared synthetic IR.

    Output is truncated to the input length and rescaled so its peak matches
    the input peak. Strength 0 returns the input unchanged (unit impulse).
    """
    if spec.kind != "reverb":
        raise InputError(f"apply_reverb cannot apply kind {spec.kind!r}")
    ir = make_reverb_ir(spec.reverb_strength, clip.sample_rate_hz, spec.rng_seed)
    if len(ir) == 1:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)

    x = clip.samples.astype(np.float64)
    wet = np.empty_like(x)
    for c in range(clip.n_channels):
        wet[c] = np.convolve(x[c], ir)[:clip.n_samples]
    peak_in = np.max(np.abs(x))
    peak_out = np.max(np.abs(wet))
    if peak_out > 0.0:
        wet *= peak_in / peak_out
    return AudioClip(samples=wet.astype(np.float32), sample_rate_hz=clip.sample_rate_hz)
