//! Two-alternative forced choice (2AFC) annotation protocol and its
//! append-only record store.
//!
//! Each serving shows one real and one synthetic image in random left/right
//! placement and asks either "which is real" or "which is fake"; the prompt
//! alternates per pair with every serving. Annotators must paint the region
//! that supports their choice. Submissions are judged against the recorded
//! placement and persisted to a JSON-lines log that is replayed on open.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{PairRecord, PairRecordSet};
use crate::grid::Grid;
use crate::jsonl;
use crate::saliency::AnnotatorMask;

/// Write an index snapshot after this many appended records.
pub const SNAPSHOT_EVERY: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    WhichIsReal,
    WhichIsFake,
}

impl Prompt {
    /// Prompt for the `n`-th serving (0-based) of a pair.
    pub fn for_serving(n: usize) -> Self {
        if n.is_multiple_of(2) {
            Prompt::WhichIsReal
        } else {
            Prompt::WhichIsFake
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Real,
    Fake,
}

/// The verdict rule: the choice is right when it names the role the prompt
/// asked for.
pub fn is_correct(prompt: Prompt, chosen: ImageRole) -> bool {
    matches!(
        (prompt, chosen),
        (Prompt::WhichIsReal, ImageRole::Real) | (Prompt::WhichIsFake, ImageRole::Fake)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Pixel size; `0` when unknown (mask size is then not checked).
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
}

/// One real/fake pair, as listed in the pairs manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub pair_id: String,
    /// Generator family of the fake image.
    #[serde(default)]
    pub family: String,
    pub real: ImageRef,
    pub fake: ImageRef,
}

impl PairSpec {
    fn image(&self, role: ImageRole) -> &ImageRef {
        match role {
            ImageRole::Real => &self.real,
            ImageRole::Fake => &self.fake,
        }
    }
}

/// Row-major run-length encoding of a binary mask. Each run is
/// `[start, len]` over the flattened grid; encoders never let a run cross a
/// row boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<[usize; 2]>,
}

impl RleMask {
    pub fn encode(mask: &Grid<u8>) -> Self {
        let (h, w) = mask.dims();
        let mut runs = Vec::new();
        for y in 0..h {
            let mut x = 0;
            while x < w {
                if mask.get(y, x) != 0 {
                    let start = x;
                    while x < w && mask.get(y, x) != 0 {
                        x += 1;
                    }
                    runs.push([y * w + start, x - start]);
                } else {
                    x += 1;
                }
            }
        }
        RleMask {
            width: w,
            height: h,
            runs,
        }
    }

    pub fn decode(&self) -> Result<Grid<u8>> {
        let n = self.width * self.height;
        let mut data = vec![0u8; n];
        for &[start, len] in &self.runs {
            if len == 0 || start.checked_add(len).is_none_or(|end| end > n) {
                return Err(Error::validation(format!(
                    "run [{start}, {len}] outside a {}x{} mask",
                    self.width, self.height
                )));
            }
            data[start..start + len].fill(1);
        }
        Grid::from_vec(self.height, self.width, data)
    }

    pub fn painted_pixels(&self) -> usize {
        self.runs.iter().map(|r| r[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Serving {
    pub pair_id: String,
    pub annotator_id: String,
    pub prompt: Prompt,
    pub left_image_id: String,
    pub right_image_id: String,
    /// Index of this serving among all servings of the pair.
    pub pair_serving_index: usize,
}

impl Serving {
    pub fn image_on(&self, side: Side) -> &str {
        match side {
            Side::Left => &self.left_image_id,
            Side::Right => &self.right_image_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NextPair {
    Pair(Serving),
    /// The annotator has been shown every pair.
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    pub pair_id: String,
    pub annotator_id: String,
    pub prompt: Prompt,
    pub chosen_side: Side,
    pub strokes: RleMask,
    #[serde(default)]
    pub duration_ms: u64,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessVerdict {
    pub pair_id: String,
    pub annotator_id: String,
    pub correct: bool,
    pub annotated_image_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord {
    Serving(Serving),
    Submission {
        submission: AnnotationSubmission,
        verdict: CorrectnessVerdict,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub pairs: usize,
    pub servings: usize,
    /// Every submission ever stored, resubmissions included.
    pub submissions: usize,
    /// Latest submission per (pair, annotator).
    pub current_submissions: usize,
    pub correct: usize,
    pub prompt_counts: BTreeMap<String, [usize; 2]>,
    pub per_pair: PairRecordSet,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskExport {
    pub masks: Vec<AnnotatorMask>,
    /// Records that could not be used, with the reason.
    pub exclusions: Vec<String>,
}

#[derive(Serialize)]
struct IndexSnapshot<'a> {
    records: usize,
    servings: usize,
    submissions: usize,
    served_counts: &'a BTreeMap<String, usize>,
}

/// Annotation state: pair pool, servings, and the append-only record log.
#[derive(Debug)]
pub struct AnnotationStore {
    pairs: BTreeMap<String, PairSpec>,
    dir: Option<PathBuf>,
    rng: ChaCha8Rng,
    served_counts: BTreeMap<String, usize>,
    prompt_counts: BTreeMap<String, [usize; 2]>,
    seen: HashMap<String, BTreeSet<String>>,
    servings: HashMap<(String, String), Serving>,
    submissions: Vec<(AnnotationSubmission, CorrectnessVerdict)>,
    current: BTreeMap<(String, String), usize>,
    records: usize,
    corrupt: Vec<String>,
}

const LOG_FILE: &str = "records.jsonl";
const INDEX_FILE: &str = "index.json";

impl AnnotationStore {
    /// In-memory store (nothing persisted).
    pub fn in_memory(pairs: Vec<PairSpec>, seed: u64) -> Result<Self> {
        Self::build(pairs, None, seed)
    }

    /// Open a store in `dir`, replaying any existing record log.
    pub fn open(pairs: Vec<PairSpec>, dir: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut store = Self::build(pairs, Some(dir.to_path_buf()), seed)?;
        let log = dir.join(LOG_FILE);
        if log.exists() {
            let f = fs::File::open(&log).map_err(|e| Error::io(&log, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&log, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogRecord>(&line) {
                    Ok(rec) => store.apply(rec, true),
                    Err(e) => store.corrupt.push(format!("{}:{}: {e}", log.display(), n + 1)),
                }
            }
        }
        Ok(store)
    }

    fn build(pairs: Vec<PairSpec>, dir: Option<PathBuf>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::validation("pair pool is empty"));
        }
        let mut map = BTreeMap::new();
        for p in pairs {
            if p.real.image_id == p.fake.image_id {
                return Err(Error::validation(format!("pair {:?} uses one image twice", p.pair_id)));
            }
            let id = p.pair_id.clone();
            if map.insert(id.clone(), p).is_some() {
                return Err(Error::validation(format!("duplicate pair id {id:?}")));
            }
        }
        Ok(AnnotationStore {
            served_counts: map.keys().map(|k| (k.clone(), 0)).collect(),
            prompt_counts: map.keys().map(|k| (k.clone(), [0, 0])).collect(),
            pairs: map,
            dir,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seen: HashMap::new(),
            servings: HashMap::new(),
            submissions: Vec::new(),
            current: BTreeMap::new(),
            records: 0,
            corrupt: Vec::new(),
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PairSpec> {
        self.pairs.values()
    }

    /// Look up an image by id across all pairs.
    pub fn image(&self, image_id: &str) -> Option<&ImageRef> {
        self.pairs
            .values()
            .flat_map(|p| [&p.real, &p.fake])
            .find(|i| i.image_id == image_id)
    }

    fn apply(&mut self, rec: LogRecord, replay: bool) {
        match &rec {
            LogRecord::Serving(s) => {
                if replay {
                    // Keep the placement stream aligned with the live run.
                    let _: bool = self.rng.random();
                }
                *self.served_counts.entry(s.pair_id.clone()).or_insert(0) += 1;
                let counts = self.prompt_counts.entry(s.pair_id.clone()).or_insert([0, 0]);
                counts[usize::from(s.prompt == Prompt::WhichIsFake)] += 1;
                self.seen
                    .entry(s.annotator_id.clone())
                    .or_default()
                    .insert(s.pair_id.clone());
                self.servings
                    .insert((s.pair_id.clone(), s.annotator_id.clone()), s.clone());
            }
            LogRecord::Submission { submission, verdict } => {
                let key = (submission.pair_id.clone(), submission.annotator_id.clone());
                self.current.insert(key, self.submissions.len());
                self.submissions.push((submission.clone(), verdict.clone()));
            }
        }
        self.records += 1;
    }

    fn append(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(dir) = &self.dir {
            jsonl::append(&dir.join(LOG_FILE), &rec)?;
        }
        self.apply(rec, false);
        if self.records.is_multiple_of(SNAPSHOT_EVERY) {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Write `index.json` with record and serving counts.
    pub fn snapshot(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let snap = IndexSnapshot {
            records: self.records,
            servings: self.servings.len(),
            submissions: self.submissions.len(),
            served_counts: &self.served_counts,
        };
        let path = dir.join(INDEX_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&snap)?).map_err(|e| Error::io(&path, e))
    }

    /// Serve the least-served pair this annotator has not seen (ties by pair
    /// id), with the prompt given by the pair's serving parity and a fresh
    /// random placement.
    pub fn next_pair(&mut self, annotator_id: &str) -> Result<NextPair> {
        if annotator_id.is_empty() {
            return Err(Error::validation("annotator id is required"));
        }
        let seen = self.seen.get(annotator_id);
        let choice = self
            .pairs
            .keys()
            .filter(|id| seen.is_none_or(|s| !s.contains(*id)))
            .min_by_key(|id| self.served_counts[*id])
            .cloned();
        let Some(pair_id) = choice else {
            return Ok(NextPair::Done);
        };
        let pair = &self.pairs[&pair_id];
        let n = self.served_counts[&pair_id];
        let real_left: bool = self.rng.random();
        let (left, right) = if real_left {
            (&pair.real, &pair.fake)
        } else {
            (&pair.fake, &pair.real)
        };
        let serving = Serving {
            pair_id: pair_id.clone(),
            annotator_id: annotator_id.to_string(),
            prompt: Prompt::for_serving(n),
            left_image_id: left.image_id.clone(),
            right_image_id: right.image_id.clone(),
            pair_serving_index: n,
        };
        self.append(LogRecord::Serving(serving.clone()))?;
        Ok(NextPair::Pair(serving))
    }

    /// Judge and persist a submission. A repeated (pair, annotator)
    /// submission replaces the current one; the earlier record stays in the
    /// log.
    pub fn submit(&mut self, sub: AnnotationSubmission) -> Result<CorrectnessVerdict> {
        let pair = self
            .pairs
            .get(&sub.pair_id)
            .ok_or_else(|| Error::validation(format!("unknown pair {:?}", sub.pair_id)))?;
        let serving = self
            .servings
            .get(&(sub.pair_id.clone(), sub.annotator_id.clone()))
            .ok_or_else(|| {
                Error::validation(format!(
                    "pair {:?} was never served to annotator {:?}",
                    sub.pair_id, sub.annotator_id
                ))
            })?;
        if serving.prompt != sub.prompt {
            return Err(Error::validation("submission prompt differs from the served prompt"));
        }
        let chosen_id = serving.image_on(sub.chosen_side).to_string();
        let role = if chosen_id == pair.real.image_id {
            ImageRole::Real
        } else {
            ImageRole::Fake
        };
        let image = pair.image(role);
        if image.width > 0
            && image.height > 0
            && (sub.strokes.width, sub.strokes.height) != (image.width, image.height)
        {
            return Err(Error::shape(
                format!("mask {}x{}", image.width, image.height),
                format!("{}x{}", sub.strokes.width, sub.strokes.height),
            ));
        }
        let mask = sub.strokes.decode()?;
        if mask.as_slice().iter().all(|&v| v == 0) {
            return Err(Error::validation("annotation mask is empty; painting a region is mandatory"));
        }
        let verdict = CorrectnessVerdict {
            pair_id: sub.pair_id.clone(),
            annotator_id: sub.annotator_id.clone(),
            correct: is_correct(sub.prompt, role),
            annotated_image_id: chosen_id,
        };
        self.append(LogRecord::Submission {
            submission: sub,
            verdict: verdict.clone(),
        })?;
        Ok(verdict)
    }

    /// Decode current submissions into masks, ordered by (timestamp, pair id).
    pub fn export_masks(&self, correct_only: bool) -> MaskExport {
        let mut picked: Vec<&(AnnotationSubmission, CorrectnessVerdict)> = self
            .current
            .values()
            .map(|&i| &self.submissions[i])
            .filter(|(_, v)| v.correct || !correct_only)
            .collect();
        picked.sort_by(|a, b| {
            (a.0.timestamp, &a.0.pair_id, &a.0.annotator_id).cmp(&(b.0.timestamp, &b.0.pair_id, &b.0.annotator_id))
        });
        let mut out = MaskExport {
            masks: Vec::with_capacity(picked.len()),
            exclusions: self.corrupt.clone(),
        };
        for (sub, verdict) in picked {
            match sub.strokes.decode() {
                Ok(mask) => out.masks.push(AnnotatorMask {
                    image_id: verdict.annotated_image_id.clone(),
                    annotator_id: sub.annotator_id.clone(),
                    mask,
                    correct: verdict.correct,
                }),
                Err(e) => out
                    .exclusions
                    .push(format!("pair {:?} annotator {:?}: {e}", sub.pair_id, sub.annotator_id)),
            }
        }
        out
    }

    /// Per-pair decisions from current submissions.
    pub fn pair_records(&self) -> PairRecordSet {
        let mut by_pair: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        for &i in self.current.values() {
            let (sub, v) = &self.submissions[i];
            by_pair.entry(sub.pair_id.as_str()).or_default().push(v.correct);
        }
        PairRecordSet {
            pairs: by_pair
                .into_iter()
                .map(|(id, decisions)| PairRecord {
                    pair_id: id.to_string(),
                    family: self.pairs[id].family.clone(),
                    decisions,
                })
                .collect(),
        }
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            pairs: self.pairs.len(),
            servings: self.served_counts.values().sum(),
            submissions: self.submissions.len(),
            current_submissions: self.current.len(),
            correct: self
                .current
                .values()
                .filter(|&&i| self.submissions[i].1.correct)
                .count(),
            prompt_counts: self.prompt_counts.clone(),
            per_pair: self.pair_records(),
        }
    }

    pub fn served_count(&self, pair_id: &str) -> usize {
        self.served_counts.get(pair_id).copied().unwrap_or(0)
    }

    /// `[which_is_real, which_is_fake]` servings of a pair.
    pub fn prompt_counts(&self, pair_id: &str) -> [usize; 2] {
        self.prompt_counts.get(pair_id).copied().unwrap_or([0, 0])
    }

    pub fn record_count(&self) -> usize {
        self.records
    }
}

/// Read a pairs manifest (one [`PairSpec`] per line).
pub fn read_pairs(path: &Path) -> Result<Vec<PairSpec>> {
    jsonl::read(path)
}

/// Wire form of an exported mask: one JSON line per annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedMask {
    pub image_id: String,
    pub annotator_id: String,
    pub correct: bool,
    pub mask: RleMask,
}

impl ExportedMask {
    pub fn from_mask(m: &AnnotatorMask) -> Self {
        ExportedMask {
            image_id: m.image_id.clone(),
            annotator_id: m.annotator_id.clone(),
            correct: m.correct,
            mask: RleMask::encode(&m.mask),
        }
    }

    pub fn decode(&self) -> Result<AnnotatorMask> {
        Ok(AnnotatorMask {
            image_id: self.image_id.clone(),
            annotator_id: self.annotator_id.clone(),
            mask: self.mask.decode()?,
            correct: self.correct,
        })
    }
}
