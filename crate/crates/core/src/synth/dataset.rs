use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{degrade_with_params, render_text, DegradationConfig, DegradeParams, GlyphAtlas};
use crate::geometry::{read_jsonl, write_jsonl};
use crate::parallel::par_map;
use crate::rng::{derive_seed, keyed_rng, stage};
use crate::{Error, ImagePlane, Result};

pub const MIN_HEIGHT: usize = 16;
pub const MAX_HEIGHT: usize = 512;
pub const MANIFEST_NAME: &str = "manifest.jsonl";
const DATASET_FORMAT: &str = "textsr-dataset-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub charset: String,
    /// Number of distinct texts.
    pub n: usize,
    /// Degraded variants per text.
    pub dup: usize,
    pub degradation: DegradationConfig,
    pub seed: u64,
    /// Render height range in pixels, drawn per text.
    pub heights: [usize; 2],
    pub max_chars: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            charset: super::default_charset(),
            n: 100,
            dup: 20,
            degradation: DegradationConfig::default(),
            seed: 0,
            heights: [48, 48],
            max_chars: 10,
        }
    }
}

/// First line of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub spec: DatasetSpec,
    pub records: usize,
    /// Texts dropped by the 16–512 px height filter.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub hr_path: String,
    pub lr_path: String,
    pub text: String,
    pub height_px: usize,
    pub language_tag: String,
    pub seed: u64,
    pub degrade_params: DegradeParams,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

pub fn language_tag(text: &str) -> &'static str {
    let ascii = text.chars().filter(|c| c.is_ascii()).count();
    match (ascii, text.chars().count()) {
        (a, n) if a == n => "latin",
        (0, _) => "cjk",
        _ => "mixed",
    }
}

/// Text `i` of a dataset: length uniform in `1..=max_chars`, characters i.i.d. uniform.
pub fn sample_text(charset: &[char], max_chars: usize, seed: u64, i: u64) -> String {
    let mut rng = keyed_rng(seed, i, stage::TEXT);
    let len = rng.random_range(1..=max_chars.max(1));
    (0..len).map(|_| charset[rng.random_range(0..charset.len())]).collect()
}

fn io_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Renders `n` texts, writes `dup` degraded variants of each, and the JSONL manifest.
pub fn build_dataset(spec: &DatasetSpec, atlas: &GlyphAtlas, out_dir: &Path, workers: usize) -> Result<DatasetManifest> {
    spec.degradation.validate()?;
    let charset: Vec<char> = spec.charset.chars().collect();
    if charset.is_empty() && spec.n > 0 {
        return Err(Error::Config("empty charset".into()));
    }
    if let Some(&c) = charset.iter().find(|&&c| !atlas.contains(c)) {
        return Err(Error::UnknownGlyph(c));
    }
    if spec.heights[0] > spec.heights[1] || spec.heights[0] == 0 {
        return Err(Error::Config(format!("heights range {:?}", spec.heights)));
    }
    io_dir(&out_dir.join("hr"))?;
    io_dir(&out_dir.join("lr"))?;
    let ids: Vec<u64> = (0..spec.n as u64).collect();
    let per_text = par_map(&ids, workers, |_, &i| -> Result<Option<Vec<DatasetRecord>>> {
        let text = sample_text(&charset, spec.max_chars, spec.seed, i);
        let height = keyed_rng(spec.seed, i, stage::SPLIT).random_range(spec.heights[0]..=spec.heights[1]);
        if !(MIN_HEIGHT..=MAX_HEIGHT).contains(&height) {
            return Ok(None);
        }
        let hr = render_text(&text, atlas, height)?;
        let hr_path = format!("hr/{i:06}.png");
        hr.save_png(&out_dir.join(&hr_path))?;
        let mut recs = Vec::with_capacity(spec.dup);
        for d in 0..spec.dup as u64 {
            let seed = derive_seed(spec.seed, i * spec.dup as u64 + d, stage::DEGRADE);
            let (lr, params) = degrade_with_params(&hr, &spec.degradation, seed)?;
            let lr_path = format!("lr/{i:06}_{d:02}.png");
            lr.save_png(&out_dir.join(&lr_path))?;
            recs.push(DatasetRecord {
                id: format!("{i:06}_{d:02}"),
                hr_path: hr_path.clone(),
                lr_path,
                text: text.clone(),
                height_px: height,
                language_tag: language_tag(&text).into(),
                seed,
                degrade_params: params,
            });
        }
        Ok(Some(recs))
    });
    let mut records = Vec::new();
    let mut rejected = 0;
    for r in per_text {
        match r? {
            Some(recs) => records.extend(recs),
            None => rejected += 1,
        }
    }
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        spec: spec.clone(),
        records: records.len(),
        rejected,
    };
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        header,
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    fn write(&self) -> Result<()> {
        let mut lines = vec![serde_json::to_value(&self.header).expect("header serializes")];
        lines.extend(self.records.iter().map(|r| serde_json::to_value(r).expect("record serializes")));
        write_jsonl(&self.path(), &lines)
    }

    /// Opens `manifest.jsonl` (or a directory containing it).
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let lines: Vec<serde_json::Value> = read_jsonl(&file, "dataset manifest")?;
        let bad = |msg: String| Error::Format {
            what: "dataset manifest",
            msg: format!("{}: {msg}", file.display()),
        };
        let mut it = lines.into_iter();
        let header: DatasetHeader = serde_json::from_value(it.next().ok_or_else(|| bad("missing header".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        let records = it
            .enumerate()
            .map(|(i, v)| serde_json::from_value(v).map_err(|e| bad(format!("record {i}: {e}"))))
            .collect::<Result<Vec<DatasetRecord>>>()?;
        if records.len() != header.records {
            return Err(bad(format!("header declares {} records, found {}", header.records, records.len())));
        }
        Ok(DatasetManifest { root, header, records })
    }

    /// `(lr, hr)` planes of a record.
    pub fn load_pair(&self, rec: &DatasetRecord) -> Result<(ImagePlane, ImagePlane)> {
        let lr = ImagePlane::load_png(&self.root.join(&rec.lr_path))?;
        let hr = ImagePlane::load_png(&self.root.join(&rec.hr_path))?;
        lr.ensure_same_shape(&hr)?;
        Ok((lr, hr))
    }
}
