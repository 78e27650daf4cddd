//! Synthetic grounding tasks, annotation files and dataset directories.
//!
//! Each video is a sequence of background frames with one to a few activity
//! segments. Every activity has a fixed prototype feature vector; frames
//! inside a segment carry their activity's prototype, and every frame gets
//! independent Gaussian noise. A query names one activity, optionally with
//! an ordinal ("the second time ...") when the activity occurs twice.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use fian_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{parse_num, parse_pairs};
use crate::encoders::resample_indices;
use crate::error::{FianError, Result};
use crate::harness::featfile::{read_feature_file, write_feature_file};
use crate::localizer::Segment;

/// Verb synonyms naming each activity; index = prototype.
pub const ACTIVITY_WORDS: [[&str; 2]; 8] = [
    ["jumps", "hops"],
    ["waves", "gestures"],
    ["runs", "jogs"],
    ["sits", "rests"],
    ["claps", "applauds"],
    ["spins", "twirls"],
    ["throws", "tosses"],
    ["climbs", "ascends"],
];
const ORDINALS: [&str; 2] = ["first", "second"];
const SUBJECTS: [&str; 3] = ["person", "man", "woman"];
const FILLERS: [&str; 3] = ["quickly", "again", "there"];

pub fn activity_of_token(token: &str) -> Option<usize> {
    ACTIVITY_WORDS.iter().position(|w| w.contains(&token))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_v: usize,
    pub d_f: usize,
    pub prototypes: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub ordinal_fraction: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_segments: usize,
    /// Background frames between neighbouring segments, at least.
    pub min_gap: usize,
    /// Raw video lengths are `n_v` times one of these factors.
    pub raw_factors: Vec<usize>,
    pub seconds_per_frame: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_v: 32,
            d_f: 32,
            prototypes: 4,
            amplitude: 1.0,
            noise: 0.25,
            ordinal_fraction: 0.2,
            train: 2000,
            val: 200,
            test: 400,
            min_len: 6,
            max_len: 14,
            max_segments: 3,
            min_gap: 2,
            raw_factors: vec![1, 2],
            seconds_per_frame: 0.5,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FianError::Config(m));
        if self.prototypes == 0 || self.prototypes > ACTIVITY_WORDS.len() || self.prototypes > self.d_f {
            return fail(format!("prototypes must lie in 1..={}", ACTIVITY_WORDS.len().min(self.d_f)));
        }
        if self.ordinal_fraction > 0.0 && self.prototypes < 2 {
            return fail("ordinal queries need at least two prototypes".into());
        }
        if !(0.0..=1.0).contains(&self.ordinal_fraction) {
            return fail("ordinal_fraction must lie in [0, 1]".into());
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return fail(format!("segment lengths {}..={} are invalid", self.min_len, self.max_len));
        }
        let needed = if self.ordinal_fraction > 0.0 { 2 } else { 1 };
        if self.max_segments < needed {
            return fail(format!("max_segments must be at least {needed}"));
        }
        if self.min_gap == 0 {
            return fail("min_gap must be at least 1".into());
        }
        if needed * self.min_len + (needed - 1) * self.min_gap > self.n_v {
            return fail(format!(
                "{needed} segment(s) of at least {} frames do not fit in n_v = {}",
                self.min_len, self.n_v
            ));
        }
        if self.noise < 0.0 || self.amplitude < 4.0 * self.noise {
            return fail(format!(
                "amplitude {} must be at least four noise standard deviations ({})",
                self.amplitude, self.noise
            ));
        }
        if self.raw_factors.is_empty() || self.raw_factors.contains(&0) || self.seconds_per_frame <= 0.0 {
            return fail("raw_factors must be positive, seconds_per_frame positive".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_v" => self.n_v = parse_num(key, v)?,
            "d_f" => self.d_f = parse_num(key, v)?,
            "prototypes" => self.prototypes = parse_num(key, v)?,
            "amplitude" => self.amplitude = parse_num(key, v)?,
            "noise" => self.noise = parse_num(key, v)?,
            "ordinal_fraction" => self.ordinal_fraction = parse_num(key, v)?,
            "train" => self.train = parse_num(key, v)?,
            "val" => self.val = parse_num(key, v)?,
            "test" => self.test = parse_num(key, v)?,
            "min_len" => self.min_len = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "max_segments" => self.max_segments = parse_num(key, v)?,
            "min_gap" => self.min_gap = parse_num(key, v)?,
            "raw_factors" => {
                self.raw_factors = v.split(',').map(|s| parse_num(key, s)).collect::<Result<_>>()?;
            }
            "seconds_per_frame" => self.seconds_per_frame = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            other => return Err(FianError::Config(format!("unknown dataset key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_pairs(text)? {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let factors: Vec<String> = self.raw_factors.iter().map(|f| f.to_string()).collect();
        format!(
            "n_v = {}\nd_f = {}\nprototypes = {}\namplitude = {}\nnoise = {}\nordinal_fraction = {}\n\
             train = {}\nval = {}\ntest = {}\nmin_len = {}\nmax_len = {}\nmax_segments = {}\nmin_gap = {}\n\
             raw_factors = {}\nseconds_per_frame = {}\nseed = {}\n",
            self.n_v,
            self.d_f,
            self.prototypes,
            self.amplitude,
            self.noise,
            self.ordinal_fraction,
            self.train,
            self.val,
            self.test,
            self.min_len,
            self.max_len,
            self.max_segments,
            self.min_gap,
            factors.join(","),
            self.seconds_per_frame,
            self.seed
        )
    }
}

/// A query, its video features and the target segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<String>,
    /// Inclusive frame range on the `n_v` grid, 1-based.
    pub start: usize,
    pub end: usize,
    pub duration: f64,
    /// Raw features, `raw_len × d_f`.
    pub features: Tensor<f32>,
}

impl Sample {
    pub fn gt(&self) -> Segment {
        Segment::new(self.start as f64, self.end as f64)
    }
}

/// One activity occurrence: prototype and inclusive 1-based frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occurrence {
    pub activity: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(FianError::Input(format!("unknown split {name:?}"))),
        }
    }
}

/// A generated dataset together with what the generator knows about it.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub spec: DatasetSpec,
    pub data: Dataset,
    /// `prototypes × d_f`.
    pub prototypes: Tensor<f32>,
    /// Per split, per sample, in time order.
    pub layouts: [Vec<Vec<Occurrence>>; 3],
}

/// Orthonormal directions (Gram-Schmidt on Gaussian draws) scaled by `amplitude`.
fn make_prototypes(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < spec.prototypes {
        let mut v: Vec<f64> = (0..spec.d_f).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let data = basis.iter().flatten().map(|&x| (x * spec.amplitude) as f32).collect();
    Tensor::matrix(spec.prototypes, spec.d_f, data).expect("shape")
}

/// Places segments of the given lengths in order, with at least `gap`
/// background frames between neighbours. Returns 0-based starts.
fn place(lengths: &[usize], gap: usize, n_v: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let used: usize = lengths.iter().sum::<usize>() + (lengths.len() - 1) * gap;
    let free = n_v.checked_sub(used)?;
    // split `free` extra frames into len+1 gaps
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut starts = Vec::with_capacity(lengths.len());
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        pos += cut - prev_cut + if i > 0 { gap } else { 0 };
        prev_cut = cut;
        starts.push(pos);
        pos += len;
    }
    Some(starts)
}

fn layout(spec: &DatasetSpec, ordinal: bool, rng: &mut ChaCha8Rng) -> Result<(Vec<Occurrence>, usize, Option<usize>)> {
    let target = rng.gen_range(0..spec.prototypes);
    let mut others: Vec<usize> = (0..spec.prototypes).filter(|&a| a != target).collect();
    others.shuffle(rng);
    let mut acts = if ordinal {
        let extra = rng.gen_range(0..=(spec.max_segments - 2).min(others.len()));
        let mut a = vec![target, target];
        a.extend_from_slice(&others[..extra]);
        a
    } else {
        let extra = rng.gen_range(0..=(spec.max_segments - 1).min(others.len()));
        let mut a = vec![target];
        a.extend_from_slice(&others[..extra]);
        a
    };
    acts.shuffle(rng);
    for _ in 0..200 {
        let lengths: Vec<usize> = acts.iter().map(|_| rng.gen_range(spec.min_len..=spec.max_len)).collect();
        if let Some(starts) = place(&lengths, spec.min_gap, spec.n_v, rng) {
            let occ: Vec<Occurrence> = acts
                .iter()
                .zip(starts.iter().zip(&lengths))
                .map(|(&activity, (&s, &l))| Occurrence { activity, start: s + 1, end: s + l })
                .collect();
            let nth = if ordinal { Some(rng.gen_range(0..2)) } else { None };
            let which = nth.unwrap_or(0);
            let gt = occ
                .iter()
                .enumerate()
                .filter(|(_, o)| o.activity == target)
                .nth(which)
                .map(|(i, _)| i)
                .expect("target placed");
            return Ok((occ, gt, nth));
        }
        // too long for this many segments: drop a distractor and retry
        if acts.len() > if ordinal { 2 } else { 1 } {
            let pos = acts.iter().position(|&a| a != target).expect("distractor exists");
            acts.remove(pos);
        }
    }
    Err(FianError::Config(format!("cannot place segments of {}..={} frames in n_v = {}", spec.min_len, spec.max_len, spec.n_v)))
}

fn query_tokens(activity: usize, nth: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut t: Vec<&str> = Vec::new();
    if let Some(k) = nth {
        t.extend(["the", ORDINALS[k], "time"]);
    }
    t.push("a");
    t.push(SUBJECTS[rng.gen_range(0..SUBJECTS.len())]);
    t.push(ACTIVITY_WORDS[activity][rng.gen_range(0..2)]);
    if rng.gen_bool(0.5) {
        t.push(FILLERS[rng.gen_range(0..FILLERS.len())]);
    }
    t.into_iter().map(str::to_string).collect()
}

fn render(spec: &DatasetSpec, protos: &Tensor<f32>, occ: &[Occurrence], rng: &mut ChaCha8Rng) -> (Tensor<f32>, f64) {
    let factor = spec.raw_factors[rng.gen_range(0..spec.raw_factors.len())];
    let raw_len = factor * spec.n_v;
    let noise = Normal::new(0.0, spec.noise).expect("noise is nonnegative");
    let mut data = Vec::with_capacity(raw_len * spec.d_f);
    for row in 0..raw_len {
        let frame = row / factor + 1;
        let proto = occ.iter().find(|o| o.start <= frame && frame <= o.end).map(|o| protos.row(o.activity));
        for j in 0..spec.d_f {
            let clean = proto.map_or(0.0, |p| p[j] as f64);
            data.push((clean + noise.sample(rng)) as f32);
        }
    }
    let features = Tensor::matrix(raw_len, spec.d_f, data).expect("shape");
    (features, raw_len as f64 * spec.seconds_per_frame)
}

/// Deterministic in `spec` (including its seed).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes = make_prototypes(spec, &mut rng);
    let mut splits: [Vec<Sample>; 3] = Default::default();
    let mut layouts: [Vec<Vec<Occurrence>>; 3] = Default::default();
    for (k, (name, count)) in [("train", spec.train), ("val", spec.val), ("test", spec.test)].into_iter().enumerate() {
        for i in 0..count {
            let ordinal = rng.gen_bool(spec.ordinal_fraction);
            let (occ, gt, nth) = layout(spec, ordinal, &mut rng)?;
            let tokens = query_tokens(occ[gt].activity, nth, &mut rng);
            let (features, duration) = render(spec, &prototypes, &occ, &mut rng);
            splits[k].push(Sample {
                id: format!("{name}-{i:05}"),
                tokens,
                start: occ[gt].start,
                end: occ[gt].end,
                duration,
                features,
            });
            layouts[k].push(occ);
        }
    }
    let [train, val, test] = splits;
    Ok(Synthetic { spec: spec.clone(), data: Dataset { train, val, test }, prototypes, layouts })
}

/// Reference solver with access to the prototypes: labels each grid frame by
/// its nearest prototype (or background), smooths short runs away and picks
/// the run named by the query.
pub fn oracle_solve(sample: &Sample, prototypes: &Tensor<f32>, n_v: usize) -> Option<Segment> {
    let idx = resample_indices(sample.features.rows(), n_v);
    let mut labels: Vec<Option<usize>> = idx
        .iter()
        .map(|&r| {
            let x = sample.features.row(r);
            let mut best = (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>(), None);
            for k in 0..prototypes.rows() {
                let d: f64 = x.iter().zip(prototypes.row(k)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, Some(k));
                }
            }
            best.1
        })
        .collect();
    // majority filter over three frames removes isolated mislabels
    let raw = labels.clone();
    for i in 1..n_v.saturating_sub(1) {
        if raw[i - 1] == raw[i + 1] && raw[i] != raw[i - 1] {
            labels[i] = raw[i - 1];
        }
    }
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n_v {
        let mut j = i;
        while j + 1 < n_v && labels[j + 1] == labels[i] {
            j += 1;
        }
        if let Some(a) = labels[i] {
            runs.push((a, i + 1, j + 1));
        }
        i = j + 1;
    }
    let activity = sample.tokens.iter().find_map(|t| activity_of_token(t))?;
    let nth = sample.tokens.iter().find_map(|t| ORDINALS.iter().position(|o| o == t)).unwrap_or(0);
    let matching: Vec<_> = runs.iter().filter(|r| r.0 == activity && r.2 > r.1).collect();
    let pick = if sample.tokens.iter().any(|t| ORDINALS.contains(&t.as_str())) {
        matching.get(nth).copied()
    } else {
        matching.iter().max_by_key(|r| r.2 - r.1).copied()
    }?;
    Some(Segment::new(pick.1 as f64, pick.2 as f64))
}

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub tokens: Vec<String>,
    pub start: usize,
    pub end: usize,
    pub duration: f64,
    /// Feature file path relative to the dataset directory.
    pub video: String,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `<split>.jsonl` annotations and `features/<id>.fiat` for every
/// sample, plus `spec.txt` and `prototypes.fiat` when given.
pub fn write_dataset(dir: &Path, data: &Dataset, extra: Option<(&DatasetSpec, &Tensor<f32>)>) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| FianError::io(&feat_dir, e))?;
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        let mut file = fs::File::create(&path).map_err(|e| FianError::io(&path, e))?;
        for s in data.split(name)? {
            let video = format!("features/{}.fiat", s.id);
            write_feature_file(&dir.join(&video), &s.features)?;
            let ann = Annotation {
                id: s.id.clone(),
                tokens: s.tokens.clone(),
                start: s.start,
                end: s.end,
                duration: s.duration,
                video,
            };
            let line = serde_json::to_string(&ann).expect("annotation serializes");
            writeln!(file, "{line}").map_err(|e| FianError::io(&path, e))?;
        }
    }
    if let Some((spec, protos)) = extra {
        let path = dir.join("spec.txt");
        fs::write(&path, spec.to_text()).map_err(|e| FianError::io(&path, e))?;
        write_feature_file(&dir.join("prototypes.fiat"), protos)?;
    }
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| FianError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FianError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line).map_err(|e| FianError::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if ann.start >= ann.end || ann.start == 0 || ann.tokens.is_empty() || !(ann.duration > 0.0) {
            return Err(FianError::Annotation {
                path: path.to_path_buf(),
                line: i + 1,
                message: "need 1 <= start < end, a nonempty query and a positive duration".into(),
            });
        }
        out.push(ann);
    }
    Ok(out)
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    read_annotations(&dir.join(format!("{split}.jsonl")))?
        .into_iter()
        .map(|a| {
            Ok(Sample {
                features: read_feature_file(&dir.join(&a.video))?,
                id: a.id,
                tokens: a.tokens,
                start: a.start,
                end: a.end,
                duration: a.duration,
            })
        })
        .collect()
}

/// Reads every split present in `dir`; missing split files are empty.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let load = |name: &str| {
        if dir.join(format!("{name}.jsonl")).exists() {
            read_split(dir, name)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Dataset { train: load("train")?, val: load("val")?, test: load("test")? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec { train: 40, val: 5, test: 5, ..DatasetSpec::default() }
    }

    #[test]
    fn placement_leaves_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let lengths = [6, 9, 4];
            let starts = place(&lengths, 2, 24, &mut rng).unwrap();
            for i in 1..3 {
                assert!(starts[i] >= starts[i - 1] + lengths[i - 1] + 2);
            }
            assert!(starts[2] + lengths[2] <= 24);
        }
        assert!(place(&[10, 10], 1, 20, &mut rng).is_none());
    }

    #[test]
    fn ground_truth_holds_named_activity() {
        let syn = generate_dataset(&small()).unwrap();
        for (s, occ) in syn.data.train.iter().zip(&syn.layouts[0]) {
            let named = s.tokens.iter().find_map(|t| activity_of_token(t)).unwrap();
            let hit = occ.iter().find(|o| o.start == s.start && o.end == s.end).unwrap();
            assert_eq!(hit.activity, named);
            assert!(1 <= s.start && s.start < s.end && s.end <= 32);
            assert_eq!(s.features.rows() % 32, 0);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec { prototypes: 1, ..small() }.validate().is_err());
        assert!(DatasetSpec { min_len: 20, max_len: 30, ..small() }.validate().is_err());
        assert!(DatasetSpec { noise: 0.5, ..small() }.validate().is_err());
        assert_eq!(DatasetSpec::from_text(&small().to_text()).unwrap(), small());
    }
}
