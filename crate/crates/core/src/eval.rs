//! Mask-adherence statistics for generated toy frames, and the blinded
//! real/fake rating session (build + score).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, Rgb, RgbImage};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Image;
use crate::maskpipe::{Class, SemanticMap};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image is {image:?} but mask is {mask:?}")]
    ShapeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("{dir}: need {need} images, found {found}")]
    NotEnoughImages {
        dir: String,
        need: usize,
        found: usize,
    },
    #[error("rater {rater} is missing {missing} answer(s)")]
    IncompleteResponses { rater: String, missing: usize },
    #[error("rater {rater} answered unknown item {item}")]
    UnknownItem { rater: String, item: String },
    #[error("rater {rater} answered item {item} twice")]
    DuplicateResponse { rater: String, item: String },
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
    #[error("no responses")]
    NoResponses,
    #[error("session: {0}")]
    Session(String),
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DARK_MARGIN: f64 = 0.1;
pub const BLANK_MAX: f64 = 0.1;

/// Luminance statistics over one labelled region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionStats {
    pub pixels: usize,
    pub mean: f64,
    /// Mean over the region of the 3×3 same-region luminance variance.
    pub local_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdherenceReport {
    /// Indexed by class id; `None` when the region is empty.
    pub regions: [Option<RegionStats>; 4],
    /// `None` when a region the rule needs is absent.
    pub dark_darker: Option<bool>,
    pub floats_textured: Option<bool>,
    pub blank_black: Option<bool>,
}

impl AdherenceReport {
    pub fn region(&self, c: Class) -> Option<&RegionStats> {
        self.regions[c.id() as usize].as_ref()
    }

    /// Every applicable rule holds.
    pub fn passes(&self) -> bool {
        [self.dark_darker, self.floats_textured, self.blank_black]
            .iter()
            .all(|r| r.unwrap_or(true))
    }
}

pub fn adherence_report(image: &Image, map: &SemanticMap) -> Result<AdherenceReport, EvalError> {
    let (w, h) = (map.width(), map.height());
    if (image.width, image.height) != (w, h) {
        return Err(EvalError::ShapeMismatch {
            image: (image.width, image.height),
            mask: (w, h),
        });
    }
    let lum = image.luminance();
    let labels = map.labels();
    let mut sum = [0f64; 4];
    let mut var_sum = [0f64; 4];
    let mut n = [0usize; 4];
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x];
            let k = c.id() as usize;
            let (mut s, mut s2, mut m) = (0f64, 0f64, 0f64);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if labels[yy * w + xx] == c {
                        let v = lum[yy * w + xx] as f64;
                        s += v;
                        s2 += v * v;
                        m += 1.0;
                    }
                }
            }
            let mu = s / m;
            var_sum[k] += (s2 / m - mu * mu).max(0.0);
            sum[k] += lum[y * w + x] as f64;
            n[k] += 1;
        }
    }
    let regions: [Option<RegionStats>; 4] = std::array::from_fn(|k| {
        (n[k] > 0).then(|| RegionStats {
            pixels: n[k],
            mean: sum[k] / n[k] as f64,
            local_var: var_sum[k] / n[k] as f64,
        })
    });
    let get = |c: Class| regions[c.id() as usize];
    let both = |a: Class, b: Class| get(a).zip(get(b));
    Ok(AdherenceReport {
        dark_darker: both(Class::Dark, Class::Clean).map(|(d, c)| d.mean + DARK_MARGIN < c.mean),
        floats_textured: both(Class::Floats, Class::Clean).map(|(f, c)| f.local_var > c.local_var),
        blank_black: get(Class::Blank).map(|b| b.mean < BLANK_MAX),
        regions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Real,
    Fake,
}

impl Truth {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Some(Self::Real),
            "fake" => Some(Self::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::Fake => "fake",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VttItem {
    pub id: String,
    pub image: PathBuf,
    pub truth: Truth,
    /// Where the image was drawn from.
    pub source: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub rater: String,
    pub item: String,
    pub answer: Truth,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VttSession {
    pub items: Vec<VttItem>,
    pub seed: u64,
    pub responses: BTreeMap<String, BTreeMap<String, Truth>>,
}

/// Rater-facing directory inside a session directory.
pub const SHEET_DIR: &str = "sheet";
pub const KEY_FILE: &str = "key.tsv";
pub const SESSION_FILE: &str = "session.json";
const GRID_TILE: u32 = 64;
const GRID_COLS: usize = 10;

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if p.is_file() && matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn pick(dir: &Path, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PathBuf>, EvalError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let all = list_images(dir)?;
    if all.len() < n {
        return Err(EvalError::NotEnoughImages {
            dir: dir.display().to_string(),
            need: n,
            found: all.len(),
        });
    }
    let mut idx = index::sample(rng, all.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i].clone()).collect())
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    seed: u64,
    n_real: usize,
    n_fake: usize,
    items: Vec<String>,
}

/// Draws images without replacement, shuffles them by `seed`, and writes
/// `out/sheet/` (numbered PNGs, answer template, overview grid) for raters
/// plus `out/key.tsv` and `out/session.json` for the organiser.
pub fn vtt_build(
    real_dir: &Path,
    fake_dir: &Path,
    n_real: usize,
    n_fake: usize,
    seed: u64,
    out: &Path,
) -> Result<VttSession, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(PathBuf, Truth)> = pick(real_dir, n_real, &mut rng)?
        .into_iter()
        .map(|p| (p, Truth::Real))
        .chain(
            pick(fake_dir, n_fake, &mut rng)?
                .into_iter()
                .map(|p| (p, Truth::Fake)),
        )
        .collect();
    pool.shuffle(&mut rng);

    let sheet = out.join(SHEET_DIR);
    std::fs::create_dir_all(&sheet)?;
    let width = pool.len().max(1).to_string().len().max(3);
    let mut items = Vec::with_capacity(pool.len());
    let mut thumbs = Vec::with_capacity(pool.len());
    for (i, (src, truth)) in pool.into_iter().enumerate() {
        let id = format!("item_{:0width$}", i + 1);
        let img = image::open(&src)
            .map_err(|e| EvalError::Image {
                path: src.display().to_string(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let dst = sheet.join(format!("{id}.png"));
        img.save_with_format(&dst, image::ImageFormat::Png)
            .map_err(std::io::Error::other)?;
        thumbs.push(image::imageops::resize(
            &img,
            GRID_TILE,
            GRID_TILE,
            FilterType::Triangle,
        ));
        items.push(VttItem {
            id,
            image: dst,
            truth,
            source: src,
        });
    }

    let mut template = String::from("rater_id\titem_id\tanswer\n");
    for it in &items {
        template.push_str(&format!("\t{}\t\n", it.id));
    }
    std::fs::write(sheet.join("answers_template.tsv"), template)?;
    overview_grid(&thumbs)
        .save_with_format(sheet.join("grid.png"), image::ImageFormat::Png)
        .map_err(std::io::Error::other)?;

    let mut key = String::from("item_id\ttruth\tsource\n");
    for it in &items {
        key.push_str(&format!(
            "{}\t{}\t{}\n",
            it.id,
            it.truth,
            it.source.display()
        ));
    }
    std::fs::write(out.join(KEY_FILE), key)?;
    let meta = SessionMeta {
        seed,
        n_real,
        n_fake,
        items: items.iter().map(|i| i.id.clone()).collect(),
    };
    std::fs::write(
        out.join(SESSION_FILE),
        serde_json::to_string_pretty(&meta).expect("session meta serializes"),
    )?;
    Ok(VttSession {
        items,
        seed,
        responses: BTreeMap::new(),
    })
}

fn overview_grid(thumbs: &[RgbImage]) -> RgbImage {
    let gap = 2u32;
    let cols = thumbs.len().clamp(1, GRID_COLS) as u32;
    let rows = thumbs.len().div_ceil(GRID_COLS).max(1) as u32;
    let mut g = RgbImage::from_pixel(
        cols * GRID_TILE + (cols + 1) * gap,
        rows * GRID_TILE + (rows + 1) * gap,
        Rgb([255, 255, 255]),
    );
    for (i, t) in thumbs.iter().enumerate() {
        let (c, r) = ((i % GRID_COLS) as u32, (i / GRID_COLS) as u32);
        image::imageops::replace(
            &mut g,
            t,
            (gap + c * (GRID_TILE + gap)) as i64,
            (gap + r * (GRID_TILE + gap)) as i64,
        );
    }
    g
}

/// Rebuild a session from `key.tsv` + `session.json` in `dir`.
pub fn load_session(dir: &Path) -> Result<VttSession, EvalError> {
    let meta: SessionMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(SESSION_FILE))?)
        .map_err(|e| EvalError::Session(e.to_string()))?;
    let key = std::fs::read_to_string(dir.join(KEY_FILE))?;
    let mut truth = BTreeMap::new();
    for (n, line) in key.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| EvalError::BadLine {
            line: n + 1,
            msg: msg.to_string(),
        };
        if cols.len() < 3 {
            return Err(bad("expected item_id, truth, source"));
        }
        let t = Truth::parse(cols[1]).ok_or_else(|| bad("truth must be real or fake"))?;
        truth.insert(cols[0].to_string(), (t, PathBuf::from(cols[2])));
    }
    let sheet = dir.join(SHEET_DIR);
    let items = meta
        .items
        .iter()
        .map(|id| {
            let (t, src) = truth
                .get(id)
                .cloned()
                .ok_or_else(|| EvalError::Session(format!("{id} is missing from the key")))?;
            Ok(VttItem {
                id: id.clone(),
                image: sheet.join(format!("{id}.png")),
                truth: t,
                source: src,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(VttSession {
        items,
        seed: meta.seed,
        responses: BTreeMap::new(),
    })
}

/// Parses `rater_id \t item_id \t answer` lines; a leading header and blank
/// lines are skipped.
pub fn parse_responses(text: &str) -> Result<Vec<Response>, EvalError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && line.starts_with("rater_id")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let bad = |msg: String| EvalError::BadLine { line: n + 1, msg };
        if cols.len() != 3 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(bad("expected rater_id, item_id, answer".into()));
        }
        let answer = Truth::parse(cols[2])
            .ok_or_else(|| bad(format!("answer {:?} is not real or fake", cols[2])))?;
        out.push(Response {
            rater: cols[0].to_string(),
            item: cols[1].to_string(),
            answer,
        });
    }
    Ok(out)
}

impl VttSession {
    pub fn add_responses(
        &mut self,
        responses: impl IntoIterator<Item = Response>,
    ) -> Result<(), EvalError> {
        let known: BTreeSet<&str> = self.items.iter().map(|i| i.id.as_str()).collect();
        for r in responses {
            if !known.contains(r.item.as_str()) {
                return Err(EvalError::UnknownItem {
                    rater: r.rater,
                    item: r.item,
                });
            }
            let slot = self.responses.entry(r.rater.clone()).or_default();
            if slot.insert(r.item.clone(), r.answer).is_some() {
                return Err(EvalError::DuplicateResponse {
                    rater: r.rater,
                    item: r.item,
                });
            }
        }
        Ok(())
    }

    pub fn count(&self, truth: Truth) -> usize {
        self.items.iter().filter(|i| i.truth == truth).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Each rater's fractions, averaged with equal weight.
    #[default]
    RaterMean,
    /// All answered (rater, item) pairs counted together; allows gaps.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RaterScore {
    pub rater: String,
    pub real_marked_real: usize,
    pub real_answered: usize,
    pub fake_marked_real: usize,
    pub fake_answered: usize,
}

fn frac(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl RaterScore {
    pub fn real_as_real(&self) -> Option<f64> {
        frac(self.real_marked_real, self.real_answered)
    }

    pub fn fake_as_real(&self) -> Option<f64> {
        frac(self.fake_marked_real, self.fake_answered)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VttScore {
    pub aggregation: Aggregation,
    /// `None` when the session has no real items.
    pub real_as_real_accuracy: Option<f64>,
    /// `None` when the session has no fake items.
    pub fake_as_real_rate: Option<f64>,
    pub per_rater: Vec<RaterScore>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn vtt_score(session: &VttSession, aggregation: Aggregation) -> Result<VttScore, EvalError> {
    if session.responses.is_empty() {
        return Err(EvalError::NoResponses);
    }
    let mut per_rater = Vec::with_capacity(session.responses.len());
    for (rater, answers) in &session.responses {
        let missing = session.items.len() - answers.len();
        if aggregation == Aggregation::RaterMean && missing > 0 {
            return Err(EvalError::IncompleteResponses {
                rater: rater.clone(),
                missing,
            });
        }
        let mut s = RaterScore {
            rater: rater.clone(),
            real_marked_real: 0,
            real_answered: 0,
            fake_marked_real: 0,
            fake_answered: 0,
        };
        for it in &session.items {
            let Some(&a) = answers.get(&it.id) else {
                continue;
            };
            let said_real = (a == Truth::Real) as usize;
            match it.truth {
                Truth::Real => {
                    s.real_answered += 1;
                    s.real_marked_real += said_real;
                }
                Truth::Fake => {
                    s.fake_answered += 1;
                    s.fake_marked_real += said_real;
                }
            }
        }
        per_rater.push(s);
    }
    let (rr, fr) = match aggregation {
        Aggregation::RaterMean => (
            mean(per_rater.iter().map(RaterScore::real_as_real)),
            mean(per_rater.iter().map(RaterScore::fake_as_real)),
        ),
        Aggregation::Pooled => {
            let sum = |f: fn(&RaterScore) -> usize| per_rater.iter().map(f).sum::<usize>();
            (
                frac(sum(|s| s.real_marked_real), sum(|s| s.real_answered)),
                frac(sum(|s| s.fake_marked_real), sum(|s| s.fake_answered)),
            )
        }
    };
    Ok(VttScore {
        aggregation,
        real_as_real_accuracy: rr,
        fake_as_real_rate: fr,
        per_rater,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

impl VttScore {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "raters: {}\naggregation: {:?}\nreal judged real: {}\nfake judged real: {}\n",
            self.per_rater.len(),
            self.aggregation,
            opt(self.real_as_real_accuracy),
            opt(self.fake_as_real_rate)
        );
        for r in &self.per_rater {
            s.push_str(&format!(
                "  {}: real→real {}/{}  fake→real {}/{}\n",
                r.rater, r.real_marked_real, r.real_answered, r.fake_marked_real, r.fake_answered
            ));
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("rater_id\treal_as_real\tfake_as_real\tn_real\tn_fake\n");
        for r in &self.per_rater {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.rater,
                opt(r.real_as_real()),
                opt(r.fake_as_real()),
                r.real_answered,
                r.fake_answered
            ));
        }
        s.push_str(&format!(
            "ALL\t{}\t{}\t\t\n",
            opt(self.real_as_real_accuracy),
            opt(self.fake_as_real_rate)
        ));
        s
    }
}
