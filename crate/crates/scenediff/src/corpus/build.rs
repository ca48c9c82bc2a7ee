//! Corpus directory builder: per-record scene/caption/image files plus a
//! manifest written last as the commit point.
//!
//! Layout: `scenes/{id}.json`, `captions/{id}.txt` (space-separated tokens),
//! `images/{id}.bin`, `vocab.txt`, `manifest.json`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::caption::caption_scene;
use super::generate::generate_scene;
use super::pseudo_image::render_pseudo_image;
use super::vocab::Vocab;
use super::{CorpusParams, DenseImageTokens, PromptTokens};
use crate::error::{Error, Result};
use crate::nn::hex;
use crate::scene::{crop_scene, CameraModel, LayoutKind, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: Split,
    pub scene_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: u32,
    pub tool_version: String,
    pub seed: u64,
    pub n_records: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub params: CorpusParams,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn digest(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn ids_for(&self, split: Split) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }
}

/// One loaded corpus record with both canonical crops prepared.
#[derive(Debug, Clone)]
pub struct CorpusRecord {
    pub id: u64,
    /// Full generated scene over the union region, ego frame.
    pub scene: SceneGraph,
    /// Ego-centered crop (prompt layout).
    pub ego_crop: SceneGraph,
    /// Forward-only crop (image layout).
    pub forward_crop: SceneGraph,
    pub caption: PromptTokens,
    pub image: DenseImageTokens,
}

/// Deterministic split assignment: records are ordered by a seed-keyed hash
/// and partitioned 80/10/10, so exact split sizes follow from arithmetic
/// while membership stays a function of (seed, id).
fn assign_splits(seed: u64, n: usize) -> Vec<Split> {
    let mut keyed: Vec<(u64, usize)> = (0..n)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update((i as u64).to_le_bytes());
            let d = h.finalize();
            (u64::from_le_bytes(d[0..8].try_into().unwrap()), i)
        })
        .collect();
    keyed.sort_unstable();
    let n_train = n * 8 / 10;
    let n_val = n * 9 / 10 - n_train;
    let mut out = vec![Split::Test; n];
    for (rank, &(_, id)) in keyed.iter().enumerate() {
        out[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Generate and write `n` records under `out_dir`. Returns the manifest.
///
/// Record files are written in parallel; the manifest is written last so a
/// complete manifest implies a complete corpus.
pub fn build_corpus(n: usize, params: &CorpusParams, out_dir: &Path) -> Result<CorpusManifest> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    for sub in ["scenes", "captions", "images"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
    }
    let vocab = Vocab::new();
    vocab.save(&out_dir.join("vocab.txt"))?;

    let cam = CameraModel::default_forward();
    let splits = assign_splits(params.seed, n);

    let digests: Vec<Result<String>> = (0..n as u64)
        .into_par_iter()
        .map(|id| -> Result<String> {
            let scene = generate_scene(id, params)?;
            let ego_crop = crop_scene(&scene, LayoutKind::EgoCentered)?;
            let forward_crop = crop_scene(&scene, LayoutKind::ForwardOnly)?;
            let caption = caption_scene(&ego_crop, &vocab)?;
            let image = render_pseudo_image(&forward_crop, &cam);

            let scene_json = scene.to_json()?;
            let scene_path = out_dir.join(format!("scenes/{id}.json"));
            std::fs::write(&scene_path, &scene_json)
                .map_err(|e| Error::io(scene_path.clone(), e))?;

            let caption_text = vocab.decode(&caption.ids)?;
            let cap_path = out_dir.join(format!("captions/{id}.txt"));
            std::fs::write(&cap_path, &caption_text).map_err(|e| Error::io(cap_path.clone(), e))?;

            let img_path = out_dir.join(format!("images/{id}.bin"));
            std::fs::write(&img_path, image.to_bytes())
                .map_err(|e| Error::io(img_path.clone(), e))?;

            Ok(hex(&Sha256::digest(scene_json.as_bytes())))
        })
        .collect();

    let mut entries = Vec::with_capacity(n);
    for (id, digest) in digests.into_iter().enumerate() {
        entries.push(ManifestEntry {
            id: id as u64,
            split: splits[id],
            scene_digest: digest?,
        });
    }

    let manifest = CorpusManifest {
        schema: 1,
        tool_version: crate::TOOL_VERSION.to_string(),
        seed: params.seed,
        n_records: n,
        n_train: entries.iter().filter(|e| e.split == Split::Train).count(),
        n_val: entries.iter().filter(|e| e.split == Split::Val).count(),
        n_test: entries.iter().filter(|e| e.split == Split::Test).count(),
        params: params.clone(),
        entries,
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_record(dir: &Path, id: u64) -> Result<CorpusRecord> {
    let scene_path = dir.join(format!("scenes/{id}.json"));
    let scene = SceneGraph::from_json(
        &std::fs::read_to_string(&scene_path).map_err(|e| Error::io(scene_path, e))?,
    )?;
    let ego_crop = crop_scene(&scene, LayoutKind::EgoCentered)?;
    let forward_crop = crop_scene(&scene, LayoutKind::ForwardOnly)?;

    let vocab = Vocab::new();
    let cap_path = dir.join(format!("captions/{id}.txt"));
    let caption_text = std::fs::read_to_string(&cap_path).map_err(|e| Error::io(cap_path, e))?;
    let caption = PromptTokens {
        ids: vocab.encode(caption_text.trim())?,
    };

    let img_path: PathBuf = dir.join(format!("images/{id}.bin"));
    let image =
        DenseImageTokens::from_bytes(&std::fs::read(&img_path).map_err(|e| Error::io(img_path, e))?)?;

    Ok(CorpusRecord {
        id,
        scene,
        ego_crop,
        forward_crop,
        caption,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64) -> CorpusParams {
        CorpusParams {
            seed,
            agent_count_min: 1,
            agent_count_max: 6,
            ..Default::default()
        }
    }

    #[test]
    fn ten_records_split_8_1_1() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_corpus(10, &small_params(5), dir.path()).unwrap();
        assert_eq!((m.n_train, m.n_val, m.n_test), (8, 1, 1));
    }

    #[test]
    fn rebuild_gives_identical_manifest_digest() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_corpus(12, &small_params(9), d1.path()).unwrap();
        let m2 = build_corpus(12, &small_params(9), d2.path()).unwrap();
        assert_eq!(m1.digest().unwrap(), m2.digest().unwrap());
        let m3 = build_corpus(12, &small_params(10), d2.path()).unwrap();
        assert_ne!(m1.digest().unwrap(), m3.digest().unwrap());
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        build_corpus(4, &small_params(3), dir.path()).unwrap();
        for id in 0..4 {
            let rec = load_record(dir.path(), id).unwrap();
            let regenerated = generate_scene(id, &small_params(3)).unwrap();
            assert_eq!(rec.scene, regenerated);
            rec.image.validate().unwrap();
            let vocab = Vocab::new();
            let expected = caption_scene(&rec.ego_crop, &vocab).unwrap();
            assert_eq!(rec.caption, expected);
        }
    }

    #[test]
    fn split_membership_is_seed_stable() {
        let a = assign_splits(7, 100);
        let b = assign_splits(7, 100);
        assert_eq!(a, b);
        let c = assign_splits(8, 100);
        assert_ne!(a, c);
        assert_eq!(a.iter().filter(|s| **s == Split::Train).count(), 80);
        assert_eq!(a.iter().filter(|s| **s == Split::Val).count(), 10);
    }
}
