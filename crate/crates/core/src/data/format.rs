//! Dataset directories.
//!
//! * `manifest.txt`: a `hiermatch-dataset 1` header, `d_raw = ..`, then one
//!   line per record:
//!   `record identity=3 modality=sketch variant=coarse n=9 offset=1234 tree=0-1>9;...`
//!   where `offset` counts f64 values into `features.bin` and `tree` is
//!   `none` when no ground truth is known (`-` is the tree of one leaf).
//! * `features.bin`: all region rows, little-endian f64, row-major.
//! * `split.txt`: `train <ids...>` and `test <ids...>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::synth::{Dataset, DetailLevel, MergeTree, RegionFeatureRecord};
use crate::error::{Error, Result};
use crate::hierarchy::Branch;
use crate::tensor::Tensor;

const HEADER: &str = "hiermatch-dataset 1";

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{HEADER}\nd_raw = {}\n", ds.d_raw);
    let mut bytes = Vec::new();
    let mut offset = 0usize;
    for r in &ds.records {
        if r.regions.cols() != ds.d_raw {
            return Err(Error::Data(format!(
                "record of identity {} has width {}, dataset d_raw is {}",
                r.identity,
                r.regions.cols(),
                ds.d_raw
            )));
        }
        let tree = r.tree.as_ref().map_or("none".to_string(), MergeTree::to_text);
        manifest.push_str(&format!(
            "record identity={} modality={} variant={} n={} offset={} tree={}\n",
            r.identity,
            r.modality,
            r.variant,
            r.n_regions(),
            offset,
            tree
        ));
        for v in r.regions.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += r.regions.data().len();
    }
    let ids = |v: &[u32]| v.iter().map(|i| format!(" {i}")).collect::<String>();
    let split = format!("train{}\ntest{}\n", ids(&ds.train), ids(&ds.test));

    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(|e| Error::io(&p, e))
    };
    write("manifest.txt", manifest.as_bytes())?;
    write("features.bin", &bytes)?;
    write("split.txt", split.as_bytes())
}

fn parse_record(line: &str, d_raw: usize, values: &[f64], lineno: usize) -> Result<RegionFeatureRecord> {
    let err = |msg: String| Error::Data(format!("manifest.txt:{lineno}: {msg}"));
    let fields: HashMap<&str, &str> = line
        .split_whitespace()
        .skip(1)
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("missing {k}")));
    let num = |k: &str| {
        field(k)?
            .parse::<usize>()
            .map_err(|_| err(format!("{k} is not a count")))
    };
    let identity = num("identity")? as u32;
    let modality: Branch = field("modality")?
        .parse()
        .map_err(|_| err("bad modality".into()))?;
    let variant: DetailLevel = field("variant")?
        .parse()
        .map_err(|_| err("bad variant".into()))?;
    let n = num("n")?;
    if n == 0 {
        return Err(Error::EmptyRegionSet);
    }
    let offset = num("offset")?;
    let end = offset
        .checked_add(n * d_raw)
        .filter(|&e| e <= values.len())
        .ok_or_else(|| err(format!("rows {offset}+{n}x{d_raw} run past features.bin")))?;
    let slice = &values[offset..end];
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(err("non-finite feature".into()));
    }
    let regions = Tensor::new(n, d_raw, slice.to_vec())?;
    let tree = match field("tree")? {
        "none" => None,
        t => Some(MergeTree::parse(t, n).map_err(|e| err(e.to_string()))?),
    };
    Ok(RegionFeatureRecord {
        identity,
        modality,
        variant,
        regions,
        tree,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest = String::from_utf8(read("manifest.txt")?)
        .map_err(|_| Error::Data("manifest.txt is not UTF-8".into()))?;
    let bytes = read("features.bin")?;
    let split = String::from_utf8(read("split.txt")?)
        .map_err(|_| Error::Data("split.txt is not UTF-8".into()))?;

    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!(
            "features.bin has {} bytes, not a whole number of f64",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut lines = manifest.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        _ => return Err(Error::Data(format!("manifest.txt must start with {HEADER:?}"))),
    }
    let d_raw = match lines.next() {
        Some((_, l)) => l
            .split_once('=')
            .filter(|(k, _)| k.trim() == "d_raw")
            .and_then(|(_, v)| v.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Data("manifest.txt line 2 must be d_raw = <positive>".into()))?,
        None => return Err(Error::Data("manifest.txt has no d_raw".into())),
    };

    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !line.starts_with("record ") {
            return Err(Error::Data(format!("manifest.txt:{}: expected a record line", i + 1)));
        }
        records.push(parse_record(line, d_raw, &values, i + 1)?);
    }

    let mut train = None;
    let mut test = None;
    for line in split.lines().filter(|l| !l.trim().is_empty()) {
        let mut toks = line.split_whitespace();
        let slot = match toks.next() {
            Some("train") => &mut train,
            Some("test") => &mut test,
            _ => return Err(Error::Data(format!("split.txt: bad line {line:?}"))),
        };
        let ids = toks
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Data(format!("split.txt: bad id in {line:?}")))?;
        *slot = Some(ids);
    }
    let (Some(train), Some(test)) = (train, test) else {
        return Err(Error::Data("split.txt needs train and test lines".into()));
    };
    if let Some(id) = train.iter().find(|id| test.contains(id)) {
        return Err(Error::Data(format!("identity {id} is in both splits")));
    }
    let ds = Dataset {
        d_raw,
        records,
        train,
        test,
    };
    for &id in ds.train.iter().chain(&ds.test) {
        if ds.photo(id).is_none() || ds.train_sketch(id).is_none() {
            return Err(Error::Data(format!("identity {id} lacks a sketch or a photo")));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_identities: 4,
            n_train: 2,
            d_raw: 5,
            n_regions_photo: 6,
            strokes_min: 4,
            strokes_max: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in ds.records.iter().zip(&back.records) {
            for (x, y) in a.regions.data().iter().zip(b.regions.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_record_rejected() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&p).unwrap();
        let first = text.lines().nth(2).unwrap().to_string();
        let n = first.split_whitespace().find(|t| t.starts_with("n=")).unwrap().to_string();
        fs::write(&p, text.replacen(&first, &first.replacen(&n, "n=0", 1), 1)).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "empty region set");
    }

    #[test]
    fn truncated_features_rejected() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("features.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
