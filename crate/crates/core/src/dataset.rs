//! On-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! - `vocab.txt`: one vocabulary entry per line, in id order.
//! - `features.tsv`: `scene_id  regions  dim  values`, values row-major and
//!   space-separated.
//! - `train.tsv`, `val.tsv`, `test.tsv`: `scene_id  feature_ref  raw
//!   distilled`, token ids space-separated, `-` for no distilled target.
//! - `manifest.tsv`: `key  value` lines, written last; a directory without
//!   it is incomplete.
//!
//! Every file is written to a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::SceneFeatures;
use crate::nn::Tensor;
use crate::taskgen::SyntheticDataset;
use crate::tokens::{TokenId, Vocab};
use crate::training::TrainPair;

pub const FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const SPLIT_HEADER: &str = "scene_id\tfeature_ref\traw\tdistilled";
pub const FEATURES_HEADER: &str = "scene_id\tregions\tdim\tvalues";

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn format_ids(ids: &[TokenId]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn parse_ids(s: &str) -> Result<Vec<TokenId>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad token id {t:?}"))))
        .collect()
}

/// A header line plus one line per row, each newline-terminated.
pub fn tsv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scene_id: usize,
    pub raw: Vec<TokenId>,
    pub distilled: Option<Vec<TokenId>>,
}

impl Record {
    pub fn to_line(&self) -> String {
        let distilled = self.distilled.as_deref().map_or_else(|| "-".to_string(), format_ids);
        format!(
            "{}\t{}\t{}\t{}",
            self.scene_id,
            feature_ref(self.scene_id),
            format_ids(&self.raw),
            distilled
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!("expected 4 columns in {line:?}")));
        }
        let scene_id = parse_usize(cols[0])?;
        if cols[1] != feature_ref(scene_id) {
            return Err(Error::Format(format!("scene {scene_id} refers to {:?}", cols[1])));
        }
        let distilled = match cols[3] {
            "-" => None,
            s => Some(parse_ids(s)?),
        };
        Ok(Record {
            scene_id,
            raw: parse_ids(cols[2])?,
            distilled,
        })
    }
}

fn feature_ref(id: usize) -> String {
    format!("features.tsv#{id}")
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad integer {s:?}")))
}

/// A dataset read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub seed: u64,
    pub vocab: Vocab,
    /// Indexed by scene id.
    pub features: Vec<SceneFeatures>,
    pub splits: BTreeMap<String, Vec<Record>>,
}

impl StoredDataset {
    pub fn split(&self, name: &str) -> Result<&[Record]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("unknown split {name:?}")))
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].dim()
    }

    /// Training pairs of one split.
    pub fn pairs(&self, name: &str) -> Result<Vec<TrainPair>> {
        Ok(self
            .split(name)?
            .iter()
            .map(|r| TrainPair {
                id: r.scene_id,
                features: self.features[r.scene_id].clone(),
                raw: r.raw.clone(),
                distilled: r.distilled.clone(),
            })
            .collect())
    }
}

fn manifest(n: usize, seed: u64, vocab: usize, dim: usize, splits: &BTreeMap<String, Vec<Record>>) -> String {
    let mut out =
        format!("version\t{FORMAT_VERSION}\nscenes\t{n}\nseed\t{seed}\nvocab_size\t{vocab}\nfeature_dim\t{dim}\n");
    for s in SPLITS {
        let distilled = splits[s].iter().filter(|r| r.distilled.is_some()).count();
        out.push_str(&format!("{s}\t{}\n{s}_distilled\t{distilled}\n", splits[s].len()));
    }
    out
}

fn write_splits(dir: &Path, ds: &StoredDataset) -> Result<()> {
    for s in SPLITS {
        let body = tsv(SPLIT_HEADER, ds.splits[s].iter().map(Record::to_line));
        write_atomic(&dir.join(format!("{s}.tsv")), body.as_bytes())?;
    }
    let m = manifest(ds.features.len(), ds.seed, ds.vocab.len(), ds.feature_dim(), &ds.splits);
    write_atomic(&dir.join("manifest.tsv"), m.as_bytes())
}

/// Writes a freshly generated dataset into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join("manifest.tsv"));
    let mut vocab = ds.vocab.entries().join("\n");
    vocab.push('\n');
    write_atomic(&dir.join("vocab.txt"), vocab.as_bytes())?;
    let features = tsv(
        FEATURES_HEADER,
        ds.scenes.iter().map(|s| {
            let v = &s.features.vectors;
            let values: Vec<String> = v.data().iter().map(|x| x.to_string()).collect();
            format!("{}\t{}\t{}\t{}", s.id, v.rows(), v.cols(), values.join(" "))
        }),
    );
    write_atomic(&dir.join("features.tsv"), features.as_bytes())?;
    let record = |id: usize| Record {
        scene_id: id,
        raw: ds.scenes[id].reference.clone(),
        distilled: None,
    };
    let splits = BTreeMap::from([
        (
            "train".to_string(),
            ds.splits.train.iter().map(|&i| record(i)).collect(),
        ),
        ("val".to_string(), ds.splits.val.iter().map(|&i| record(i)).collect()),
        ("test".to_string(), ds.splits.test.iter().map(|&i| record(i)).collect()),
    ]);
    let stored = StoredDataset {
        seed: ds.seed,
        vocab: ds.vocab.clone(),
        features: ds.scenes.iter().map(|s| s.features.clone()).collect(),
        splits,
    };
    write_splits(dir, &stored)
}

/// Stores distilled targets (by scene id) alongside the raw captions.
pub fn write_distilled(dir: &Path, ds: &mut StoredDataset, distilled: &BTreeMap<usize, Vec<TokenId>>) -> Result<()> {
    for records in ds.splits.values_mut() {
        for r in records {
            if let Some(d) = distilled.get(&r.scene_id) {
                r.distilled = Some(d.clone());
            }
        }
    }
    write_splits(dir, ds)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("{} (generate the dataset first)", path.display())),
        _ => Error::Io(e),
    })
}

/// Lines after the header, which must equal `header`.
fn body<'a>(text: &'a str, header: &str, path: &Path) -> Result<impl Iterator<Item = &'a str>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Format(format!(
            "{} does not start with {header:?}",
            path.display()
        )));
    }
    Ok(lines)
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = BTreeMap::new();
    for line in read_text(&manifest_path)?.lines() {
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        manifest.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<usize> {
        parse_usize(
            manifest
                .get(k)
                .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))?,
        )
    };
    if get("version")? != FORMAT_VERSION as usize {
        return Err(Error::Format("unsupported dataset version".into()));
    }
    let n = get("scenes")?;
    let seed: u64 = manifest["seed"]
        .parse()
        .map_err(|_| Error::Format("bad seed in manifest".into()))?;

    let vocab = Vocab::from_all(read_text(&dir.join("vocab.txt"))?.lines().map(String::from).collect())?;
    if vocab.len() != get("vocab_size")? {
        return Err(Error::Format("vocabulary size disagrees with the manifest".into()));
    }

    let fpath = dir.join("features.tsv");
    let ftext = read_text(&fpath)?;
    let mut features = Vec::with_capacity(n);
    for (i, line) in body(&ftext, FEATURES_HEADER, &fpath)?.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 || parse_usize(cols[0])? != i {
            return Err(Error::Format(format!("features line {} is malformed", i + 2)));
        }
        let (rows, dim) = (parse_usize(cols[1])?, parse_usize(cols[2])?);
        let values = cols[3]
            .split(' ')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad feature value {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        features.push(SceneFeatures::new(Tensor::matrix(rows, dim, values)?)?);
    }
    if features.len() != n {
        return Err(Error::Format(format!("{} feature rows for {n} scenes", features.len())));
    }
    if features.iter().any(|f| f.dim() != get("feature_dim").unwrap_or(0)) {
        return Err(Error::Format("feature width disagrees with the manifest".into()));
    }

    let mut splits = BTreeMap::new();
    for s in SPLITS {
        let path = dir.join(format!("{s}.tsv"));
        let text = read_text(&path)?;
        let records = body(&text, SPLIT_HEADER, &path)?
            .map(Record::parse)
            .collect::<Result<Vec<_>>>()?;
        if records.len() != get(s)? {
            return Err(Error::Format(format!("{s} split size disagrees with the manifest")));
        }
        if let Some(r) = records.iter().find(|r| r.scene_id >= n) {
            return Err(Error::Format(format!("scene {} out of range", r.scene_id)));
        }
        if let Some(bad) = records
            .iter()
            .flat_map(|r| r.raw.iter().chain(r.distilled.iter().flatten()))
            .find(|&&t| t as usize >= vocab.len())
        {
            return Err(Error::Format(format!("token {bad} outside the vocabulary")));
        }
        splits.insert(s.to_string(), records);
    }
    Ok(StoredDataset {
        seed,
        vocab,
        features,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::gen_dataset;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(30, 5).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.seed, 5);
        assert_eq!(back.vocab, ds.vocab);
        for (a, s) in back.features.iter().zip(&ds.scenes) {
            assert_eq!(a, &s.features);
        }
        assert_eq!(back.split("train").unwrap().len(), 24);
        assert_eq!(back.split("val").unwrap().len(), 3);
        assert_eq!(back.split("test").unwrap().len(), 3);
        let t = &back.split("test").unwrap()[0];
        assert_eq!(t.raw, ds.scenes[t.scene_id].reference);
        assert!(!dir.path().join("manifest.tsv.partial").exists());
    }

    #[test]
    fn writing_is_byte_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = gen_dataset(20, 9).unwrap();
        write_dataset(a.path(), &ds).unwrap();
        write_dataset(b.path(), &gen_dataset(20, 9).unwrap()).unwrap();
        for f in [
            "manifest.tsv",
            "vocab.txt",
            "features.tsv",
            "train.tsv",
            "val.tsv",
            "test.tsv",
        ] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn distilled_targets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &gen_dataset(10, 1).unwrap()).unwrap();
        let mut ds = read_dataset(dir.path()).unwrap();
        let d = BTreeMap::from([(0, vec![4, 5]), (1, vec![])]);
        write_distilled(dir.path(), &mut ds, &d).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        let train = back.pairs("train").unwrap();
        assert_eq!(train[0].distilled, Some(vec![4, 5]));
        assert_eq!(train[1].distilled, Some(vec![]));
        assert_eq!(train[2].distilled, None);
    }

    #[test]
    fn missing_and_corrupt_directories_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Missing(_))));
        write_dataset(dir.path(), &gen_dataset(10, 1).unwrap()).unwrap();
        let p = dir.path().join("val.tsv");
        fs::write(&p, format!("{SPLIT_HEADER}\n")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn id_lists_parse_back() {
        assert_eq!(parse_ids(&format_ids(&[4, 10, 2])).unwrap(), vec![4, 10, 2]);
        assert_eq!(parse_ids("").unwrap(), Vec::<TokenId>::new());
        assert!(parse_ids("4 x").is_err());
    }
}
