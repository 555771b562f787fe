//! Triplet data model, synthetic triplet generator, tokenizer, and dataset
//! directory I/O.
//!
//! A sample is one synchronized (video, tokens, spectrogram) triplet. The
//! synthetic generator draws every sample from its own counter-based stream
//! keyed by (seed, sample id), so datasets are order-independent and can be
//! generated in parallel.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{self, tag};

pub const PAD_ID: i32 = 0;
pub const MASK_ID: i32 = 1;
pub const UNK_ID: i32 = 2;

/// Shapes of one triplet: video frames, token budget, spectrogram bins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// video frames per clip
    pub frames: usize,
    /// frame height in pixels
    pub height: usize,
    /// frame width in pixels
    pub width: usize,
    /// maximum sentence length in tokens
    pub max_tokens: usize,
    /// vocabulary capacity (token ids live in [0, vocab_size))
    pub vocab_size: usize,
    /// spectrogram time bins
    pub spec_time: usize,
    /// spectrogram frequency bins
    pub spec_freq: usize,
}

impl DataConfig {
    /// Full-scale defaults: 8 frames of 224x224, 40 tokens over a 30,522-slot
    /// vocabulary, 256x256 spectrograms.
    pub fn full() -> Self {
        DataConfig {
            frames: 8,
            height: 224,
            width: 224,
            max_tokens: 40,
            vocab_size: 30522,
            spec_time: 256,
            spec_freq: 256,
        }
    }

    /// Desk-scale defaults small enough to train on a laptop CPU.
    pub fn desk() -> Self {
        DataConfig {
            frames: 2,
            height: 32,
            width: 32,
            max_tokens: 8,
            vocab_size: 64,
            spec_time: 32,
            spec_freq: 32,
        }
    }

    pub fn video_len(&self) -> usize {
        self.frames * 3 * self.height * self.width
    }

    pub fn spec_len(&self) -> usize {
        self.spec_time * self.spec_freq
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data.frames", self.frames),
            ("data.height", self.height),
            ("data.width", self.width),
            ("data.max_tokens", self.max_tokens),
            ("data.vocab_size", self.vocab_size),
            ("data.spec_time", self.spec_time),
            ("data.spec_freq", self.spec_freq),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::full()
    }
}

/// Token vocabulary with dense ids. Ids 0..3 are reserved (PAD, MASK, UNK)
/// and are never produced by tokenizing words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, i32>,
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<mask>".to_string(), "<unk>".to_string()];
        let mut map = HashMap::new();
        for w in words {
            if map.contains_key(&w) {
                continue;
            }
            map.insert(w.clone(), tokens.len() as i32);
            tokens.push(w);
        }
        Vocab { tokens, map }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens always present
    }

    pub fn id_of(&self, word: &str) -> Option<i32> {
        self.map.get(word).copied()
    }

    pub fn word_of(&self, id: i32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[0] != "<pad>"
            || tokens[1] != "<mask>"
            || tokens[2] != "<unk>"
        {
            return Err(Error::Input(
                "vocab must start with reserved tokens <pad>, <mask>, <unk>".into(),
            ));
        }
        let mut map = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(3) {
            map.insert(t.clone(), i as i32);
        }
        Ok(Vocab { tokens, map })
    }
}

/// Lowercase, split on whitespace, map words to ids (UNK when absent),
/// truncate to `max_tokens`, right-pad with PAD.
pub fn tokenize(text: &str, vocab: &Vocab, max_tokens: usize) -> Vec<i32> {
    let mut ids: Vec<i32> = text
        .to_lowercase()
        .split_whitespace()
        .take(max_tokens)
        .map(|w| vocab.id_of(w).unwrap_or(UNK_ID))
        .collect();
    ids.resize(max_tokens, PAD_ID);
    ids
}

/// Inverse of `tokenize` up to truncation and UNK; trailing PADs dropped.
pub fn detokenize(ids: &[i32], vocab: &Vocab) -> String {
    ids.iter()
        .take_while(|&&id| id != PAD_ID)
        .map(|&id| vocab.word_of(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One synchronized sample: video in [0,1], token ids, spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: u64,
    /// frames × 3 × height × width, row-major, values in [0, 1]
    pub video: Vec<f32>,
    /// length max_tokens, trailing PADs contiguous
    pub tokens: Vec<i32>,
    /// spec_time × spec_freq, time-major
    pub spectrogram: Vec<f32>,
    /// latent class drawn by the synthetic generator (correlated mode only)
    pub latent_class: Option<u32>,
}

impl Triplet {
    pub fn effective_tokens(&self) -> usize {
        self.tokens.iter().take_while(|&&t| t != PAD_ID).count()
    }

    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        if self.video.len() != cfg.video_len() {
            return Err(Error::Shape(format!(
                "sample {}: video has {} values, config expects {}",
                self.id,
                self.video.len(),
                cfg.video_len()
            )));
        }
        if self.tokens.len() != cfg.max_tokens {
            return Err(Error::Shape(format!(
                "sample {}: {} tokens, config expects {}",
                self.id,
                self.tokens.len(),
                cfg.max_tokens
            )));
        }
        if self.spectrogram.len() != cfg.spec_len() {
            return Err(Error::Shape(format!(
                "sample {}: spectrogram has {} values, config expects {}",
                self.id,
                self.spectrogram.len(),
                cfg.spec_len()
            )));
        }
        if let Some(&bad) = self
            .tokens
            .iter()
            .find(|&&t| t < 0 || t as usize >= cfg.vocab_size)
        {
            return Err(Error::Input(format!(
                "sample {}: token id {bad} outside [0, {})",
                self.id, cfg.vocab_size
            )));
        }
        let mut seen_pad = false;
        for &t in &self.tokens {
            if t == PAD_ID {
                seen_pad = true;
            } else if seen_pad {
                return Err(Error::Input(format!(
                    "sample {}: non-contiguous trailing PADs",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    /// all three modalities share one latent class and latent vector
    Correlated,
    /// each modality draws its own class and latent vector
    Random,
}

impl std::str::FromStr for GenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlated" => Ok(GenMode::Correlated),
            "random" => Ok(GenMode::Random),
            other => Err(Error::Input(format!(
                "unknown mode '{other}' (expected correlated|random)"
            ))),
        }
    }
}

const CLASS_WORD_VARIANTS: usize = 3;
const Z_COMPONENTS: usize = 3;
const Z_BUCKETS: usize = 8;
const DISTRACTORS: usize = 16;

/// Vocabulary used by the synthetic generator for `k` classes.
pub fn synthetic_vocab(k_classes: usize) -> Vocab {
    let mut words = Vec::new();
    for c in 0..k_classes {
        for v in 0..CLASS_WORD_VARIANTS {
            words.push(format!("c{c}{}", (b'a' + v as u8) as char));
        }
    }
    for j in 0..Z_COMPONENTS {
        for b in 0..Z_BUCKETS {
            words.push(format!("z{j}b{b}"));
        }
    }
    for d in 0..DISTRACTORS {
        words.push(format!("d{d}"));
    }
    Vocab::from_words(words)
}

fn synthetic_vocab_len(k_classes: usize) -> usize {
    3 + k_classes * CLASS_WORD_VARIANTS + Z_COMPONENTS * Z_BUCKETS + DISTRACTORS
}

struct ClassProto {
    freq_u: f64,
    freq_v: f64,
    phase: f64,
    chan_gain: [f64; 3],
    ridge_base: f64,
}

fn class_proto(seed: u64, class: u64, k: usize) -> ClassProto {
    let mut r = rng::stream(&[seed, tag::CLASS_PROTO, class]);
    ClassProto {
        freq_u: 1.0 + rng::below(&mut r, 3) as f64,
        freq_v: 1.0 + rng::below(&mut r, 3) as f64,
        phase: rng::uniform(&mut r, 0.0, std::f64::consts::TAU),
        chan_gain: [
            rng::uniform(&mut r, 0.6, 1.0),
            rng::uniform(&mut r, 0.6, 1.0),
            rng::uniform(&mut r, 0.6, 1.0),
        ],
        ridge_base: (class as f64 + 1.0) / (k as f64 + 1.0),
    }
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

fn gen_video(cfg: &DataConfig, proto: &ClassProto, z: &[f64], noise: &mut rand_chacha::ChaCha8Rng) -> Vec<f32> {
    let tau = std::f64::consts::TAU;
    let (vf, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut out = Vec::with_capacity(cfg.video_len());
    for f in 0..vf {
        let tf = f as f64 / (vf.max(2) - 1) as f64;
        for ch in 0..3 {
            for y in 0..h {
                let v = y as f64 / (h.max(2) - 1) as f64;
                for x in 0..w {
                    let u = x as f64 / (w.max(2) - 1) as f64;
                    let base = 0.5
                        + 0.22
                            * proto.chan_gain[ch]
                            * (tau * (proto.freq_u * u + proto.freq_v * v) + proto.phase + 0.3 * tf)
                                .sin();
                    let zmod = 0.13
                        * (1.0 + 0.1 * ch as f64)
                        * (z[0] * (tau * (u + 2.0 * v)).sin()
                            + z[1] * (tau * (2.0 * u - v)).cos()
                            + z[2] * (tau * 3.0 * u * v).sin());
                    let eta = rng::uniform(noise, -1.0, 1.0);
                    out.push((base + zmod + 0.04 * eta).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

fn gen_spectrogram(cfg: &DataConfig, proto: &ClassProto, z: &[f64], noise: &mut rand_chacha::ChaCha8Rng) -> Vec<f32> {
    let tau = std::f64::consts::TAU;
    let (t_bins, f_bins) = (cfg.spec_time, cfg.spec_freq);
    let centers = [
        0.05 + 0.9 * frac(proto.ridge_base + 0.06 * z[0]),
        0.05 + 0.9 * frac(proto.ridge_base + 0.26 + 0.06 * z[1]),
        0.05 + 0.9 * frac(proto.ridge_base + 0.52 + 0.03 * (z[0] + z[1])),
    ];
    let width = 0.045;
    let mut out = Vec::with_capacity(cfg.spec_len());
    for t in 0..t_bins {
        let tt = t as f64 / (t_bins.max(2) - 1) as f64;
        for f in 0..f_bins {
            let ff = f as f64 / (f_bins.max(2) - 1) as f64;
            let mut acc = -0.3;
            for (h, &c) in centers.iter().enumerate() {
                let amp = 1.0 / (1.0 + h as f64)
                    * (0.85 + 0.15 * (tau * (tt * (2.0 + h as f64) + 0.5 * z[2])).sin());
                let d = ff - c;
                acc += amp * (-d * d / (2.0 * width * width)).exp();
            }
            let eta = rng::uniform(noise, -1.0, 1.0);
            out.push((acc + 0.08 * eta) as f32);
        }
    }
    out
}

fn z_bucket(z: f64) -> usize {
    (((z + 1.0) / 2.0 * Z_BUCKETS as f64).floor() as usize).min(Z_BUCKETS - 1)
}

fn gen_tokens(cfg: &DataConfig, k: usize, class: u64, z: &[f64], r: &mut rand_chacha::ChaCha8Rng) -> Vec<i32> {
    let s = cfg.max_tokens;
    let base_class = 3;
    let base_z = 3 + k * CLASS_WORD_VARIANTS;
    let base_d = base_z + Z_COMPONENTS * Z_BUCKETS;
    let slack = 3.min(s.saturating_sub(5));
    let len = s - rng::below(r, slack as u64 + 1) as usize;
    let mut out = Vec::with_capacity(s);
    for pos in 0..len {
        let id = match pos {
            0 => base_class + class as usize * CLASS_WORD_VARIANTS + rng::below(r, 3) as usize,
            1 => base_z + z_bucket(z[0]),
            2 => base_z + Z_BUCKETS + z_bucket(z[1]),
            3 => base_z + 2 * Z_BUCKETS + z_bucket(z[2]),
            _ => base_d + rng::below(r, DISTRACTORS as u64) as usize,
        };
        out.push(id as i32);
    }
    out.resize(s, PAD_ID);
    out
}

fn gen_one(cfg: &DataConfig, n_classes: usize, seed: u64, mode: GenMode, id: u64) -> Triplet {
    let draw = |modality: u64| {
        let c = rng::below(&mut rng::stream(&[seed, tag::CLASS, id, modality]), n_classes as u64);
        let mut lr = rng::stream(&[seed, tag::LATENT, id, modality]);
        let z: Vec<f64> = (0..8).map(|_| rng::uniform(&mut lr, -1.0, 1.0)).collect();
        (c, z)
    };
    let ((cv, zv), (ct, zt), (ca, za)) = match mode {
        GenMode::Correlated => {
            let shared = draw(0);
            (shared.clone(), shared.clone(), shared)
        }
        GenMode::Random => (draw(1), draw(2), draw(3)),
    };
    let mut vnoise = rng::stream(&[seed, tag::VIDEO_NOISE, id]);
    let mut anoise = rng::stream(&[seed, tag::AUDIO_NOISE, id]);
    let mut tok_rng = rng::stream(&[seed, tag::TOKENS, id]);
    let video = gen_video(cfg, &class_proto(seed, cv, n_classes), &zv, &mut vnoise);
    let spectrogram = gen_spectrogram(cfg, &class_proto(seed, ca, n_classes), &za, &mut anoise);
    let tokens = gen_tokens(cfg, n_classes, ct, &zt, &mut tok_rng);
    Triplet {
        id,
        video,
        tokens,
        spectrogram,
        latent_class: match mode {
            GenMode::Correlated => Some(cv as u32),
            GenMode::Random => None,
        },
    }
}

/// A generated or loaded dataset: config, vocabulary, and triplets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub vocab: Vocab,
    pub triplets: Vec<Triplet>,
    pub mode: Option<GenMode>,
    pub k_classes: Option<usize>,
    pub seed: Option<u64>,
}

/// Deterministic synthetic triplets. Each sample depends only on
/// (seed, sample id), so generation is order-independent.
pub fn generate_synthetic(
    n: usize,
    k_classes: usize,
    seed: u64,
    mode: GenMode,
    cfg: &DataConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    if n < 1 {
        return Err(Error::Input("need at least 1 sample".into()));
    }
    if k_classes < 2 {
        return Err(Error::Input("need at least 2 classes".into()));
    }
    if synthetic_vocab_len(k_classes) > cfg.vocab_size {
        return Err(Error::Input(format!(
            "k_classes={} needs a vocab of {} but vocab_size is {}",
            k_classes,
            synthetic_vocab_len(k_classes),
            cfg.vocab_size
        )));
    }
    let triplets = parallel::map_indices(n, |i| gen_one(cfg, k_classes, seed, mode, i as u64));
    Ok(Dataset {
        config: cfg.clone(),
        vocab: synthetic_vocab(k_classes),
        triplets,
        mode: Some(mode),
        k_classes: Some(k_classes),
        seed: Some(seed),
    })
}

// ---------------------------------------------------------------------------
// binary array codec and dataset directory layout
// ---------------------------------------------------------------------------

pub const ARRAY_MAGIC: &[u8; 4] = b"VLSA";
pub const ARRAY_VERSION: u8 = 1;

pub const MOD_VIDEO: u8 = 1;
pub const MOD_TOKENS: u8 = 2;
pub const MOD_SPECTROGRAM: u8 = 3;

const DTYPE_F32: u8 = 1;
const DTYPE_I32: u8 = 2;

/// 16-byte array header: magic, version, modality tag, dtype, rank, dims.
fn write_header(out: &mut Vec<u8>, modality: u8, dtype: u8, dims: &[usize]) {
    assert!(dims.len() <= 4, "at most rank 4");
    out.extend_from_slice(ARRAY_MAGIC);
    out.push(ARRAY_VERSION);
    out.push(modality);
    out.push(dtype);
    out.push(dims.len() as u8);
    for i in 0..4 {
        let d = dims.get(i).copied().unwrap_or(0);
        assert!(d <= u16::MAX as usize, "dim too large for header");
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
}

pub fn write_f32_array(out: &mut Vec<u8>, modality: u8, dims: &[usize], values: &[f32]) {
    assert_eq!(dims.iter().product::<usize>(), values.len());
    write_header(out, modality, DTYPE_F32, dims);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_i32_array(out: &mut Vec<u8>, modality: u8, dims: &[usize], values: &[i32]) {
    assert_eq!(dims.iter().product::<usize>(), values.len());
    write_header(out, modality, DTYPE_I32, dims);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub struct ArrayBlock {
    pub modality: u8,
    pub dims: Vec<usize>,
    pub f32_values: Option<Vec<f32>>,
    pub i32_values: Option<Vec<i32>>,
}

pub fn read_array(buf: &[u8], at: &mut usize, path: &Path) -> Result<ArrayBlock> {
    let fail = |reason: String| Error::corrupt(path, reason);
    if buf.len() < *at + 16 {
        return Err(fail("truncated array header".to_string()));
    }
    let h = &buf[*at..*at + 16];
    if &h[0..4] != ARRAY_MAGIC {
        return Err(fail("bad magic".to_string()));
    }
    if h[4] != ARRAY_VERSION {
        return Err(fail(format!("unsupported version {}", h[4])));
    }
    let modality = h[5];
    let dtype = h[6];
    let rank = h[7] as usize;
    if rank > 4 {
        return Err(fail(format!("bad rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u16::from_le_bytes([h[8 + 2 * i], h[9 + 2 * i]]) as usize);
    }
    *at += 16;
    let n: usize = dims.iter().product();
    let payload = n * 4;
    if buf.len() < *at + payload {
        return Err(fail("truncated array payload".to_string()));
    }
    let body = &buf[*at..*at + payload];
    *at += payload;
    let mut block = ArrayBlock {
        modality,
        dims,
        f32_values: None,
        i32_values: None,
    };
    match dtype {
        DTYPE_F32 => {
            block.f32_values = Some(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        DTYPE_I32 => {
            block.i32_values = Some(
                body.chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        other => return Err(fail(format!("unknown dtype {other}"))),
    }
    Ok(block)
}

pub fn sample_file_name(id: u64) -> String {
    format!("sample_{id:06}.bin")
}

pub fn sample_bytes(t: &Triplet, cfg: &DataConfig) -> Vec<u8> {
    let mut out = Vec::new();
    write_f32_array(
        &mut out,
        MOD_VIDEO,
        &[cfg.frames, 3, cfg.height, cfg.width],
        &t.video,
    );
    write_i32_array(&mut out, MOD_TOKENS, &[cfg.max_tokens], &t.tokens);
    write_f32_array(
        &mut out,
        MOD_SPECTROGRAM,
        &[cfg.spec_time, cfg.spec_freq],
        &t.spectrogram,
    );
    out
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    data: DataConfig,
    count: usize,
    #[serde(default)]
    mode: Option<GenMode>,
    #[serde(default)]
    k_classes: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    vocab: Vec<String>,
    #[serde(default)]
    latent_classes: Option<Vec<u32>>,
    /// sample rate for datasets derived from raw waveform files
    #[serde(default)]
    waveform_rate_hz: Option<f64>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let latent: Option<Vec<u32>> = ds
        .triplets
        .iter()
        .map(|t| t.latent_class)
        .collect::<Option<Vec<_>>>();
    let manifest = Manifest {
        version: 1,
        data: ds.config.clone(),
        count: ds.triplets.len(),
        mode: ds.mode,
        k_classes: ds.k_classes,
        seed: ds.seed,
        vocab: ds.vocab.tokens().to_vec(),
        latent_classes: latent,
        waveform_rate_hz: None,
    };
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&mpath, e))?;

    let written: Vec<Result<()>> = parallel::map_collect(&ds.triplets, |t| {
        let path = dir.join(sample_file_name(t.id));
        fs::write(&path, sample_bytes(t, &ds.config)).map_err(|e| Error::io(&path, e))
    });
    for r in written {
        r?;
    }
    Ok(())
}

fn load_sample(path: &Path, cfg: &DataConfig, id: u64, latent: Option<u32>) -> Result<Triplet> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    let video = read_array(&buf, &mut at, path)?;
    let tokens = read_array(&buf, &mut at, path)?;
    let spec = read_array(&buf, &mut at, path)?;
    if video.modality != MOD_VIDEO || tokens.modality != MOD_TOKENS || spec.modality != MOD_SPECTROGRAM
    {
        return Err(Error::corrupt(path, "arrays out of order"));
    }
    let vdims = [cfg.frames, 3, cfg.height, cfg.width];
    if video.dims != vdims {
        return Err(Error::Shape(format!(
            "{}: video dims {:?} do not match manifest {:?}",
            path.display(),
            video.dims,
            vdims
        )));
    }
    if tokens.dims != [cfg.max_tokens] {
        return Err(Error::Shape(format!(
            "{}: token dims {:?} do not match manifest [{}]",
            path.display(),
            tokens.dims,
            cfg.max_tokens
        )));
    }
    if spec.dims != [cfg.spec_time, cfg.spec_freq] {
        return Err(Error::Shape(format!(
            "{}: spectrogram dims {:?} do not match manifest {:?}",
            path.display(),
            spec.dims,
            [cfg.spec_time, cfg.spec_freq]
        )));
    }
    let t = Triplet {
        id,
        video: video.f32_values.ok_or_else(|| Error::corrupt(path, "video dtype"))?,
        tokens: tokens.i32_values.ok_or_else(|| Error::corrupt(path, "token dtype"))?,
        spectrogram: spec.f32_values.ok_or_else(|| Error::corrupt(path, "spec dtype"))?,
        latent_class: latent,
    };
    t.validate(cfg)?;
    Ok(t)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::corrupt(&mpath, format!("manifest parse: {e}")))?;
    manifest.data.validate()?;
    let vocab = Vocab::from_token_list(manifest.vocab)?;
    let ids: Vec<u64> = (0..manifest.count as u64).collect();
    let loaded: Vec<Result<Triplet>> = parallel::map_collect(&ids, |&id| {
        let latent = manifest
            .latent_classes
            .as_ref()
            .and_then(|v| v.get(id as usize).copied());
        load_sample(&dir.join(sample_file_name(id)), &manifest.data, id, latent)
    });
    let mut triplets = Vec::with_capacity(loaded.len());
    for t in loaded {
        triplets.push(t?);
    }
    Ok(Dataset {
        config: manifest.data,
        vocab,
        triplets,
        mode: manifest.mode,
        k_classes: manifest.k_classes,
        seed: manifest.seed,
    })
}

/// Where the manifest of a dataset directory lives.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn tokenize_pads_and_truncates() {
        let vocab = Vocab::from_words(["a".to_string(), "b".to_string()]);
        assert_eq!(tokenize("", &vocab, 4), vec![PAD_ID; 4]);
        assert_eq!(tokenize("a b a", &vocab, 5), vec![3, 4, 3, PAD_ID, PAD_ID]);

        // 50 words, budget 40: exactly 40 non-PAD ids, rest dropped
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::from_words(words.iter().cloned());
        let text = words.join(" ");
        let ids = tokenize(&text, &vocab, 40);
        assert_eq!(ids.len(), 40);
        assert!(ids.iter().all(|&t| t != PAD_ID));
        assert_eq!(ids[39], vocab.id_of("w39").unwrap());
    }

    #[test]
    fn tokenize_maps_unknown_to_unk_and_never_reserved() {
        let vocab = Vocab::from_words(["hello".to_string()]);
        let ids = tokenize("hello <pad> <mask> stranger", &vocab, 6);
        assert_eq!(ids[0], 3);
        assert_eq!(ids[1], UNK_ID);
        assert_eq!(ids[2], UNK_ID);
        assert_eq!(ids[3], UNK_ID);
    }

    #[test]
    fn tokenize_idempotent_via_detokenize() {
        let vocab = Vocab::from_words(["cat".to_string(), "sat".to_string()]);
        let first = tokenize("the Cat sat", &vocab, 6);
        let second = tokenize(&detokenize(&first, &vocab), &vocab, 6);
        assert_eq!(first, second);
    }

    #[test]
    fn generator_is_deterministic_and_shaped() {
        let cfg = DataConfig::desk();
        let a = generate_synthetic(8, 4, 7, GenMode::Correlated, &cfg).unwrap();
        let b = generate_synthetic(8, 4, 7, GenMode::Correlated, &cfg).unwrap();
        assert_eq!(a.triplets, b.triplets);
        for t in &a.triplets {
            t.validate(&cfg).unwrap();
            assert_eq!(t.video.len(), cfg.video_len());
            assert_eq!(t.spectrogram.len(), cfg.spec_len());
            assert!(t.video.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let c = generate_synthetic(8, 4, 8, GenMode::Correlated, &cfg).unwrap();
        assert_ne!(a.triplets, c.triplets);
    }

    #[test]
    fn generator_full_scale_shapes() {
        let cfg = DataConfig::full();
        let ds = generate_synthetic(2, 4, 3, GenMode::Correlated, &cfg).unwrap();
        for t in &ds.triplets {
            assert_eq!(t.video.len(), 8 * 3 * 224 * 224);
            assert_eq!(t.spectrogram.len(), 256 * 256);
            assert_eq!(t.tokens.len(), 40);
        }
    }

    #[test]
    fn generator_is_order_independent() {
        let cfg = DataConfig::desk();
        let big = generate_synthetic(6, 4, 11, GenMode::Correlated, &cfg).unwrap();
        let small = generate_synthetic(3, 4, 11, GenMode::Correlated, &cfg).unwrap();
        assert_eq!(&big.triplets[..3], &small.triplets[..]);
    }

    #[test]
    fn generator_rejects_bad_args() {
        let cfg = DataConfig::desk();
        assert!(generate_synthetic(0, 4, 1, GenMode::Correlated, &cfg).is_err());
        assert!(generate_synthetic(4, 1, 1, GenMode::Correlated, &cfg).is_err());
        // vocab capacity: desk vocab_size=64, need 43 + 3k <= 64
        assert!(generate_synthetic(4, 10, 1, GenMode::Correlated, &cfg).is_err());
        assert!(generate_synthetic(4, 7, 1, GenMode::Correlated, &cfg).is_ok());
    }

    /// Brute-force pairwise L2 distances: correlated classes must cluster.
    #[test]
    fn correlated_spectrograms_cluster_by_class() {
        let cfg = DataConfig::desk();
        let ds = generate_synthetic(64, 4, 5, GenMode::Correlated, &cfg).unwrap();
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (mut within, mut cross) = ((0.0, 0usize), (0.0, 0usize));
        for i in 0..ds.triplets.len() {
            for j in (i + 1)..ds.triplets.len() {
                let d = dist(&ds.triplets[i].spectrogram, &ds.triplets[j].spectrogram);
                if ds.triplets[i].latent_class == ds.triplets[j].latent_class {
                    within = (within.0 + d, within.1 + 1);
                } else {
                    cross = (cross.0 + d, cross.1 + 1);
                }
            }
        }
        let mean_within = within.0 / within.1 as f64;
        let mean_cross = cross.0 / cross.1 as f64;
        assert!(
            mean_within < mean_cross,
            "within {mean_within} !< cross {mean_cross}"
        );
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let cfg = DataConfig::desk();
        let ds = generate_synthetic(8, 4, 9, GenMode::Correlated, &cfg).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.triplets, loaded.triplets);
        assert_eq!(ds.vocab, loaded.vocab);
        assert_eq!(ds.config, loaded.config);
        assert_eq!(loaded.mode, Some(GenMode::Correlated));
        assert_eq!(loaded.k_classes, Some(4));
    }

    #[test]
    fn load_reports_missing_file_by_name() {
        let cfg = DataConfig::desk();
        let ds = generate_synthetic(4, 4, 9, GenMode::Correlated, &cfg).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join(sample_file_name(2));
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample_000002.bin"), "error was: {err}");
    }

    #[test]
    fn load_rejects_shape_mismatch_against_manifest() {
        let cfg = DataConfig::desk();
        let ds = generate_synthetic(2, 4, 9, GenMode::Correlated, &cfg).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // rewrite the manifest to claim a narrower spectrogram
        let mpath = manifest_path(dir.path());
        let mut m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m["data"]["spec_freq"] = serde_json::json!(16);
        fs::write(&mpath, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("do not match manifest"), "error was: {err}");
    }

    #[test]
    fn random_mode_decorrelates_modalities() {
        let cfg = DataConfig::desk();
        let ds = generate_synthetic(8, 4, 21, GenMode::Random, &cfg).unwrap();
        assert!(ds.triplets.iter().all(|t| t.latent_class.is_none()));
        // the same id in correlated mode uses one shared draw; random mode
        // must not produce the identical video/spectrogram pairing
        let cds = generate_synthetic(8, 4, 21, GenMode::Correlated, &cfg).unwrap();
        assert_ne!(ds.triplets[0].video, cds.triplets[0].video);
    }
}
