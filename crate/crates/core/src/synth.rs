//! Bias-controlled synthetic forgery images.
//!
//! Every image is a grey `H x W` grid:
//!
//! ```text
//! pixel = 0.5 + noise + texture_amplitude · T_group(x, y)
//!             + [fake] artifact_amplitude · (1 + leakage · bias_group) · s · A(x, y)
//! ```
//!
//! clipped to `[0, 1]`. `T_group` is the mean of a horizontal gender wave
//! and a race wave, each with a small random phase jitter per sample. `A` is
//! a checkerboard at the Nyquist frequency. The Asian and White race waves
//! are low-frequency and vertical; the Black and Others waves run diagonally
//! near the checkerboard frequency, and the Black one is close enough to pass
//! for a faint artifact, so real images of that race are misflagged more
//! often. `s` is a per-sample strength drawn from
//! `U(0.5, 1.5)`. A positive `leakage` makes the forgery cue stronger in some
//! groups than in others.
//!
//! # Dataset file layout
//!
//! ```text
//! magic      8 bytes "FAIRDS01"
//! config     u32 byte length, then the generator config as `key=value` lines
//! count, height, width   u32 each
//! per sample: label u8, gender u8, race u8, height·width f64 pixels
//! ```
//!
//! All integers and floats are little-endian. The CSV manifest has columns
//! `index,label,gender,race,split`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{bail, Result};
use crate::metrics::Axis;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FAIRDS01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Race {
    Asian,
    Black,
    White,
    Others,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Gender::Male),
            1 => Ok(Gender::Female),
            _ => bail!(Data, "invalid gender id {id}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }
}

impl Race {
    pub const ALL: [Race; 4] = [Race::Asian, Race::Black, Race::White, Race::Others];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Race::Asian),
            1 => Ok(Race::Black),
            2 => Ok(Race::White),
            3 => Ok(Race::Others),
            _ => bail!(Data, "invalid race id {id}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Race::Asian => "Asian",
            Race::Black => "Black",
            Race::White => "White",
            Race::Others => "Others",
        }
    }
}

/// Number of intersectional groups.
pub const GROUPS: usize = 8;

/// Intersection id `gender · 4 + race`.
pub fn group_id(gender: Gender, race: Race) -> u32 {
    gender.id() * 4 + race.id()
}

pub fn group_of(id: u32) -> Result<(Gender, Race)> {
    Ok((Gender::from_id(id / 4)?, Race::from_id(id % 4)?))
}

pub fn group_name(id: u32) -> String {
    match group_of(id) {
        Ok((g, r)) => format!("{}-{}", g.name(), r.name()),
        Err(_) => format!("group-{id}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `height x width` pixels in `[0, 1]`.
    pub image: Vec<f64>,
    /// 0 real, 1 fake.
    pub label: u8,
    pub gender: Gender,
    pub race: Race,
}

impl Sample {
    pub fn group(&self) -> u32 {
        group_id(self.gender, self.race)
    }

    pub fn axis_id(&self, axis: Axis) -> u32 {
        match axis {
            Axis::Gender => self.gender.id(),
            Axis::Race => self.race.id(),
            Axis::Intersection => self.group(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Share of each intersection group, indexed by [`group_id`].
    pub proportions: [f64; GROUPS],
    pub fake_fraction: f64,
    pub noise_std: f64,
    pub texture_amplitude: f64,
    pub artifact_amplitude: f64,
    /// Per-group artifact bias in `[-1, 1]`, indexed by [`group_id`].
    pub group_bias: [f64; GROUPS],
    /// Artifact-group leakage `ρ` in `[0, 1]`.
    pub leakage: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let minor = 0.35 / 6.0;
        let mut proportions = [minor; GROUPS];
        proportions[group_id(Gender::Male, Race::White) as usize] = 0.35;
        proportions[group_id(Gender::Female, Race::White) as usize] = 0.30;
        GenConfig {
            count: 4000,
            height: 16,
            width: 16,
            proportions,
            fake_fraction: 0.5,
            noise_std: 0.1,
            texture_amplitude: 0.1,
            artifact_amplitude: 0.05,
            group_bias: default_group_bias(),
            leakage: 0.8,
            seed: 0,
        }
    }
}

/// Overrepresented groups carry the strongest forgery cue.
fn default_group_bias() -> [f64; GROUPS] {
    let mut bias = [0.0; GROUPS];
    for g in Gender::ALL {
        for r in Race::ALL {
            let race = match r {
                Race::White => 0.5,
                Race::Asian => 0.0,
                Race::Black => -0.5,
                Race::Others => -0.25,
            };
            let gender = match g {
                Gender::Male => 0.1,
                Gender::Female => -0.1,
            };
            bias[group_id(g, r) as usize] = f64::clamp(race + gender, -1.0, 1.0);
        }
    }
    bias
}

fn parse_array(value: &str) -> Result<[f64; GROUPS]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| crate::Error::Config(format!("bad number list {value:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| crate::Error::Config(format!("expected {GROUPS} comma-separated values, got {value:?}")))
}

fn join_array(values: &[f64; GROUPS]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| crate::Error::Config(format!("{key}={value:?}: {e}")))
}

impl GenConfig {
    pub const KEYS: [&'static str; 11] = [
        "count",
        "height",
        "width",
        "proportions",
        "fake_fraction",
        "noise_std",
        "texture_amplitude",
        "artifact_amplitude",
        "group_bias",
        "leakage",
        "data_seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            bail!(Config, "group proportions sum to {total}, expected 1");
        }
        if self.proportions.iter().any(|p| !(*p >= 0.0)) {
            bail!(Config, "group proportions must be nonnegative");
        }
        if self.count < 2 * GROUPS {
            bail!(Config, "need at least {} samples, got {}", 2 * GROUPS, self.count);
        }
        if self.height < 4 || self.width < 4 {
            bail!(Config, "images must be at least 4x4");
        }
        if !(0.0..=1.0).contains(&self.fake_fraction) {
            bail!(Config, "fake fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            bail!(Config, "leakage must lie in [0, 1]");
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("texture_amplitude", self.texture_amplitude),
            ("artifact_amplitude", self.artifact_amplitude),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                bail!(Config, "{name} must be finite and nonnegative");
            }
        }
        if self.group_bias.iter().any(|b| !(-1.0..=1.0).contains(b)) {
            bail!(Config, "group bias values must lie in [-1, 1]");
        }
        Ok(())
    }

    /// Set one `key=value` entry; returns `false` for keys this config does
    /// not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "count" => self.count = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "proportions" => self.proportions = parse_array(value)?,
            "fake_fraction" => self.fake_fraction = parse_num(key, value)?,
            "noise_std" => self.noise_std = parse_num(key, value)?,
            "texture_amplitude" => self.texture_amplitude = parse_num(key, value)?,
            "artifact_amplitude" => self.artifact_amplitude = parse_num(key, value)?,
            "group_bias" => self.group_bias = parse_array(value)?,
            "leakage" => self.leakage = parse_num(key, value)?,
            "data_seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("count".into(), self.count.to_string()),
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("proportions".into(), join_array(&self.proportions)),
            ("fake_fraction".into(), format!("{}", self.fake_fraction)),
            ("noise_std".into(), format!("{}", self.noise_std)),
            ("texture_amplitude".into(), format!("{}", self.texture_amplitude)),
            ("artifact_amplitude".into(), format!("{}", self.artifact_amplitude)),
            ("group_bias".into(), join_array(&self.group_bias)),
            ("leakage".into(), format!("{}", self.leakage)),
            ("data_seed".into(), self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Integer allocation of `total` by `fractions`: floors first, then the
/// leftover units to the largest remainders (lower index wins ties).
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let sum: f64 = fractions.iter().sum();
    if sum <= 0.0 {
        return vec![0; fractions.len()];
    }
    let exact: Vec<f64> = fractions.iter().map(|f| total as f64 * f / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub config: GenConfig,
    pub samples: Vec<Sample>,
}

fn sample_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn render(config: &GenConfig, gender: Gender, race: Race, fake: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (config.height, config.width);
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("finite std");
    let gender_freq = match gender {
        Gender::Male => 1.0,
        Gender::Female => 2.0,
    };
    // The Black and Others race waves run diagonally near the artifact's
    // frequency; Black's is close enough that a small receptive field cannot
    // tell it from a faint checkerboard.
    let (race_freq, race_phase, diagonal) = match race {
        Race::Asian => (1.0, 0.0, false),
        Race::Black => (7.0, PI / 2.0, true),
        Race::White => (2.0, 0.0, false),
        Race::Others => (6.0, PI / 2.0, true),
    };
    let jitter_x = rng.random_range(-0.3..0.3);
    let jitter_y = rng.random_range(-0.3..0.3);
    let strength = rng.random_range(0.5..1.5);
    let bias = config.group_bias[group_id(gender, race) as usize];
    let artifact = if fake {
        config.artifact_amplitude * (1.0 + config.leakage * bias) * strength
    } else {
        0.0
    };
    let mut img = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gx = (2.0 * PI * gender_freq * x as f64 / w as f64 + jitter_x).cos();
            let axis = if diagonal { x + y } else { y };
            let ry = (2.0 * PI * race_freq * axis as f64 / h as f64 + race_phase + jitter_y).cos();
            let texture = config.texture_amplitude * 0.5 * (gx + ry);
            let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let v = 0.5 + noise.sample(rng) + texture + artifact * checker;
            img.push(v.clamp(0.0, 1.0));
        }
    }
    img
}

/// Deterministic dataset for `config`.
///
/// Group sizes and per-group fake counts use largest-remainder rounding;
/// sample order is a seeded shuffle, and each sample's pixels come from its
/// own ChaCha stream.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let sizes = largest_remainder(config.count, &config.proportions);
    let mut cells: Vec<(Gender, Race, bool)> = Vec::with_capacity(config.count);
    for (gid, &n) in sizes.iter().enumerate() {
        let (gender, race) = group_of(gid as u32)?;
        let split = largest_remainder(n, &[1.0 - config.fake_fraction, config.fake_fraction]);
        cells.extend(std::iter::repeat_n((gender, race, false), split[0]));
        cells.extend(std::iter::repeat_n((gender, race, true), split[1]));
    }
    let mut order_rng = sample_stream(config.seed, 0);
    cells.shuffle(&mut order_rng);
    let samples = cells
        .into_iter()
        .enumerate()
        .map(|(i, (gender, race, fake))| {
            let mut rng = sample_stream(config.seed, i as u64 + 1);
            Sample {
                image: render(config, gender, race, fake, &mut rng),
                label: u8::from(fake),
                gender,
                race,
            }
        })
        .collect();
    Ok(Dataset {
        height: config.height,
        width: config.width,
        config: config.clone(),
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    /// Additive Gaussian noise, std = intensity.
    GaussianNoise,
    /// Gaussian blur, kernel std = intensity.
    GaussianBlur,
    /// `ceil(intensity)` aligned 4x4 blocks replaced by uniform noise.
    BlockNoise,
}

impl std::str::FromStr for PerturbKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GN" | "gn" => Ok(PerturbKind::GaussianNoise),
            "GB" | "gb" => Ok(PerturbKind::GaussianBlur),
            "BWN" | "bwn" => Ok(PerturbKind::BlockNoise),
            other => bail!(Usage, "unknown perturbation {other:?} (expected GN, GB or BWN)"),
        }
    }
}

impl PerturbKind {
    pub fn code(self) -> &'static str {
        match self {
            PerturbKind::GaussianNoise => "GN",
            PerturbKind::GaussianBlur => "GB",
            PerturbKind::BlockNoise => "BWN",
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    // Half-sample symmetric reflection: -1 -> 0, n -> n-1.
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn gaussian_blur(image: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|v| v / z).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wt) in weights.iter().enumerate() {
                let xx = reflect(x as isize + k as isize - radius, w);
                acc += wt * image[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wt) in weights.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - radius, h);
                acc += wt * tmp[yy * w + x];
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

/// Apply one distortion. Intensity 0 returns the image unchanged.
pub fn perturb(image: &[f64], height: usize, width: usize, kind: PerturbKind, intensity: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(intensity >= 0.0) || !intensity.is_finite() {
        bail!(Usage, "perturbation intensity must be finite and nonnegative, got {intensity}");
    }
    if image.len() != height * width {
        bail!(Dimension, "image of {} pixels is not {height}x{width}", image.len());
    }
    if intensity == 0.0 {
        return Ok(image.to_vec());
    }
    Ok(match kind {
        PerturbKind::GaussianNoise => {
            let normal = Normal::new(0.0, intensity).expect("positive std");
            image
                .iter()
                .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect()
        }
        PerturbKind::GaussianBlur => gaussian_blur(image, height, width, intensity),
        PerturbKind::BlockNoise => {
            let (bh, bw) = (height / 4, width / 4);
            let mut blocks: Vec<usize> = (0..bh * bw).collect();
            blocks.shuffle(rng);
            let n = (intensity.ceil() as usize).min(blocks.len());
            let mut out = image.to_vec();
            for &b in &blocks[..n] {
                let (by, bx) = (b / bw, b % bw);
                for y in by * 4..by * 4 + 4 {
                    for x in bx * 4..bx * 4 + 4 {
                        out[y * width + x] = rng.random::<f64>();
                    }
                }
            }
            out
        }
    })
}

/// Sample indices of the train, validation and test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Split name per sample index.
    pub fn labels(&self, n: usize) -> Vec<&'static str> {
        let mut out = vec![""; n];
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in idx {
                out[i] = name;
            }
        }
        out
    }
}

/// Stratified split with a seeded shuffle per stratum.
///
/// Strata are (intersection group, label) cells, so every split keeps both
/// the group mix and each group's real/fake balance. Counts per stratum
/// follow largest-remainder rounding of the ratios. A stratum with at least
/// five members gets at least one sample in every split whose ratio is
/// positive.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if dataset.samples.is_empty() {
        bail!(Data, "cannot split an empty dataset");
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail!(Config, "split ratios must be nonnegative and sum to 1, got {ratios:?}");
    }
    let mut strata: BTreeMap<(u32, u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        strata.entry((s.group(), s.label)).or_default().push(i);
    }
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ((g, label), mut members) in strata {
        let mut rng = sample_stream(seed, 2 * u64::from(g) + u64::from(label) + 1);
        members.shuffle(&mut rng);
        let mut counts = largest_remainder(members.len(), &ratios);
        if members.len() >= 5 {
            for k in 0..3 {
                if ratios[k] > 0.0 && counts[k] == 0 {
                    let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
                    counts[donor] -= 1;
                    counts[k] += 1;
                }
            }
        }
        let (a, rest) = members.split_at(counts[0]);
        let (b, c) = rest.split_at(counts[1]);
        out.train.extend_from_slice(a);
        out.val.extend_from_slice(b);
        out.test.extend_from_slice(c);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            config: self.config.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// `[B, 1, H, W]` tensor of the selected images.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label as usize).collect()
    }

    pub fn groups(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.samples[i].group()).collect()
    }

    pub fn axis_ids(&self, axis: Axis) -> Vec<u32> {
        self.samples.iter().map(|s| s.axis_id(axis)).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let fake = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - fake, fake)
    }

    pub fn group_counts(&self) -> [usize; GROUPS] {
        let mut c = [0; GROUPS];
        for s in &self.samples {
            c[s.group() as usize] += 1;
        }
        c
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let text = self.config.to_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for v in [self.samples.len(), self.height, self.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for s in &self.samples {
            w.write_all(&[s.label, s.gender.id() as u8, s.race.id() as u8])?;
            for p in &s.image {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Dataset> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!(Data, "not a dataset file");
        }
        let len = read_u32(r)?;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| crate::Error::Data("config block is not UTF-8".into()))?;
        let mut config = GenConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| crate::Error::Data(format!("bad config line {line:?}")))?;
            config.set(k.trim(), v.trim())?;
        }
        let count = read_u32(r)?;
        let height = read_u32(r)?;
        let width = read_u32(r)?;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut head = [0u8; 3];
            r.read_exact(&mut head)?;
            let mut image = Vec::with_capacity(height * width);
            for _ in 0..height * width {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                image.push(f64::from_le_bytes(b));
            }
            if head[0] > 1 {
                bail!(Data, "invalid label {}", head[0]);
            }
            samples.push(Sample {
                image,
                label: head[0],
                gender: Gender::from_id(u32::from(head[1]))?,
                race: Race::from_id(u32::from(head[2]))?,
            });
        }
        Ok(Dataset {
            height,
            width,
            config,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path)?;
        Dataset::read_from(&mut bytes.as_slice())
    }

    /// CSV manifest `index,label,gender,race,split`.
    pub fn write_manifest(&self, splits: Option<&SplitIndices>, w: impl Write) -> Result<()> {
        let names = splits.map(|s| s.labels(self.len()));
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "label", "gender", "race", "split"])?;
        for (i, s) in self.samples.iter().enumerate() {
            let split = names.as_ref().map_or("", |n| n[i]);
            out.write_record([
                i.to_string(),
                s.label.to_string(),
                s.gender.name().to_string(),
                s.race.name().to_string(),
                split.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            count: 200,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let mut c = small();
        c.seed = 4;
        assert_ne!(generate(&c).unwrap().samples, a.samples);
    }

    #[test]
    fn two_group_proportions() {
        let mut cfg = small();
        cfg.count = 100;
        cfg.proportions = [0.0; GROUPS];
        cfg.proportions[0] = 0.5;
        cfg.proportions[5] = 0.5;
        let d = generate(&cfg).unwrap();
        let counts = d.group_counts();
        assert_eq!(counts[0], 50);
        assert_eq!(counts[5], 50);
    }

    #[test]
    fn largest_remainder_oracle() {
        assert_eq!(largest_remainder(10, &[0.34, 0.33, 0.33]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.6, 0.2, 0.2]), vec![4, 2, 1]);
        assert_eq!(largest_remainder(5, &[1.0, 0.0, 0.0]), vec![5, 0, 0]);
    }

    #[test]
    fn bad_proportions_are_config_errors() {
        let mut cfg = small();
        cfg.proportions[0] += 0.1;
        assert!(matches!(generate(&cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_artifact_makes_classes_alike() {
        let mut cfg = small();
        cfg.artifact_amplitude = 0.0;
        cfg.count = 400;
        let d = generate(&cfg).unwrap();
        let checker = |s: &Sample| -> f64 {
            s.image
                .iter()
                .enumerate()
                .map(|(i, p)| if (i / 16 + i % 16) % 2 == 0 { *p } else { -p })
                .sum()
        };
        let scores: Vec<f64> = d.samples.iter().map(checker).collect();
        let labels: Vec<u8> = d.samples.iter().map(|s| s.label).collect();
        let auc = crate::metrics::auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.1, "auc {auc}");
    }

    #[test]
    fn perturbations_at_zero_are_identity() {
        let d = generate(&small()).unwrap();
        let img = &d.samples[0].image;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [PerturbKind::GaussianNoise, PerturbKind::GaussianBlur, PerturbKind::BlockNoise] {
            assert_eq!(&perturb(img, 16, 16, kind, 0.0, &mut rng).unwrap(), img);
        }
    }

    #[test]
    fn blur_keeps_constants() {
        let img = vec![0.37; 256];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = perturb(&img, 16, 16, PerturbKind::GaussianBlur, 2.5, &mut rng).unwrap();
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn noise_matches_regenerated_draws() {
        let img: Vec<f64> = (0..256).map(|i| (i as f64) / 300.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = perturb(&img, 16, 16, PerturbKind::GaussianNoise, 0.05, &mut rng).unwrap();
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, 0.05).unwrap();
        for (o, p) in out.iter().zip(&img) {
            let expected = (p + normal.sample(&mut oracle_rng)).clamp(0.0, 1.0);
            assert!((o - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn block_noise_touches_whole_blocks() {
        let img = vec![2.0; 256];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = perturb(&img, 16, 16, PerturbKind::BlockNoise, 1.5, &mut rng).unwrap();
        let changed = out.iter().filter(|&&v| v != 2.0).count();
        assert_eq!(changed, 32);
        assert!("JPEG".parse::<PerturbKind>().is_err());
    }

    #[test]
    fn split_examples() {
        let mut cfg = small();
        cfg.count = 100;
        cfg.proportions = [0.0; GROUPS];
        cfg.proportions[2] = 1.0;
        let d = generate(&cfg).unwrap();
        let s = split(&d, [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let all = split(&d, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(all.train.len(), 100);

        cfg.proportions[2] = 0.7;
        cfg.proportions[6] = 0.3;
        let d = generate(&cfg).unwrap();
        let s = split(&d, [0.6, 0.2, 0.2], 0).unwrap();
        let per = |idx: &[usize], g: u32| idx.iter().filter(|&&i| d.samples[i].group() == g).count();
        let expect_a = largest_remainder(70, &[0.6, 0.2, 0.2]);
        let expect_b = largest_remainder(30, &[0.6, 0.2, 0.2]);
        assert_eq!(vec![per(&s.train, 2), per(&s.val, 2), per(&s.test, 2)], expect_a);
        assert_eq!(vec![per(&s.train, 6), per(&s.val, 6), per(&s.test, 6)], expect_b);
        assert!(split(&d.subset(&[]), [0.6, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn small_strata_reach_every_split() {
        let mut cfg = small();
        cfg.count = 160;
        let d = generate(&cfg).unwrap();
        let s = split(&d, [0.9, 0.05, 0.05], 1).unwrap();
        let key = |x: &Sample| (x.group(), x.label);
        for g in 0..GROUPS as u32 {
            for label in [0, 1] {
                let n = d.samples.iter().filter(|x| key(x) == (g, label)).count();
                if n >= 5 {
                    for idx in [&s.train, &s.val, &s.test] {
                        assert!(idx.iter().any(|&i| key(&d.samples[i]) == (g, label)));
                    }
                }
            }
        }
    }

    #[test]
    fn file_round_trip_and_manifest() {
        let d = generate(&small()).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let s = split(&d, [0.6, 0.2, 0.2], 0).unwrap();
        let mut csv_buf = Vec::new();
        d.write_manifest(Some(&s), &mut csv_buf).unwrap();
        let text = String::from_utf8(csv_buf).unwrap();
        assert!(text.starts_with("index,label,gender,race,split\n"));
        assert_eq!(text.lines().count(), d.len() + 1);
    }
}
