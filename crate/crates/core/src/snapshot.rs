//! Binary parameter snapshots and the on-disk foundation bundle cache.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "LTADSNAP" | version u32 | n_config u32 | config u32 × n_config
//! n_arrays u32 | per array: name_len u32, name utf-8, len u64, f64 × len
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FoundationBundle;
use crate::encoder::{AdapterMode, EncoderConfig, EncoderWeights};
use crate::heads::TextEmbeddingSet;
use crate::params::ParamSet;
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 8] = b"LTADSNAP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub config: Vec<u32>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: Vec<u32>,
    pub arrays: Vec<(String, usize)>,
    pub checksum: String,
}

impl Snapshot {
    pub fn capture(config: Vec<u32>, params: &dyn ParamSet) -> Self {
        let mut arrays = Vec::new();
        params.visit(&mut |n, a| arrays.push((n.to_string(), a.to_vec())));
        Self { config, arrays }
    }

    /// Copies arrays into `params` by name; names and lengths must match exactly.
    pub fn restore(&self, params: &mut dyn ParamSet) -> Result<()> {
        let expected = params.names();
        if expected.len() != self.arrays.len() {
            return Err(Error::Format(format!("snapshot has {} arrays, target {}", self.arrays.len(), expected.len())));
        }
        for ((name, len), (got, data)) in expected.iter().zip(&self.arrays) {
            if name != got || *len != data.len() {
                return Err(Error::Format(format!("snapshot array {got}[{}] where {name}[{len}] expected", data.len())));
            }
        }
        let mut i = 0;
        params.visit_mut(&mut |_, a| {
            a.copy_from_slice(&self.arrays[i].1);
            i += 1;
        });
        Ok(())
    }

    pub fn manifest(&self, checksum: String) -> Manifest {
        Manifest {
            version: VERSION,
            config: self.config.clone(),
            arrays: self.arrays.iter().map(|(n, a)| (n.clone(), a.len())).collect(),
            checksum,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        self.config.iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a snapshot file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let n = r.u32()? as usize;
        let config = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("array name is not utf-8".into()))?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            arrays.push((name, raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after snapshot".into()));
        }
        Ok(Self { config, arrays })
    }

    /// Writes `path` and a `<path>.json` manifest.
    pub fn save(&self, path: &Path, checksum: String) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        let mut m = path.as_os_str().to_owned();
        m.push(".json");
        fs::write(m, serde_json::to_vec_pretty(&self.manifest(checksum))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated snapshot".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn encoder_config_fields(cfg: &EncoderConfig) -> Vec<u32> {
    [cfg.blocks, cfg.width, cfg.heads, cfg.bottleneck, cfg.grid, cfg.patch].iter().map(|&v| v as u32).chain([cfg.mode.as_u32()]).collect()
}

pub fn encoder_config_from_fields(f: &[u32]) -> Result<EncoderConfig> {
    if f.len() != 7 {
        return Err(Error::Format(format!("expected 7 encoder config fields, got {}", f.len())));
    }
    let cfg = EncoderConfig {
        blocks: f[0] as usize,
        width: f[1] as usize,
        heads: f[2] as usize,
        bottleneck: f[3] as usize,
        grid: f[4] as usize,
        patch: f[5] as usize,
        mode: AdapterMode::from_u32(f[6])?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    pretrain_accuracy: f64,
    classes: usize,
    templates: Vec<String>,
    checksum: String,
}

/// Writes `encoder.bin`, `text.csv`, `class_means.bin` and `bundle.json` into `dir`.
pub fn save_bundle(dir: &Path, bundle: &FoundationBundle) -> Result<()> {
    fs::create_dir_all(dir)?;
    let weights = Snapshot::capture(encoder_config_fields(&bundle.config), &bundle.weights);
    weights.save(&dir.join("encoder.bin"), bundle.weights.checksum())?;
    let means = crate::params::NamedTensors(vec![("class_means".into(), bundle.class_means.clone())]);
    let c = bundle.num_classes() as u32;
    Snapshot::capture(vec![c, bundle.config.width as u32], &means).save(&dir.join("class_means.bin"), means.checksum())?;
    let mut csv = Vec::new();
    bundle.text.write_csv(&mut csv)?;
    fs::write(dir.join("text.csv"), csv)?;
    let meta = BundleMeta {
        pretrain_accuracy: bundle.pretrain_accuracy,
        classes: bundle.num_classes(),
        templates: bundle.text.templates.clone(),
        checksum: bundle.checksum(),
    };
    fs::write(dir.join("bundle.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Reads a bundle written by [`save_bundle`] and verifies its checksum.
pub fn load_bundle(dir: &Path) -> Result<FoundationBundle> {
    let meta: BundleMeta = serde_json::from_slice(&fs::read(dir.join("bundle.json"))?)?;
    let snap = Snapshot::load(&dir.join("encoder.bin"))?;
    let config = encoder_config_from_fields(&snap.config)?;
    let mut weights = EncoderWeights::init(&config, &mut crate::rng::stream(0, 0))?;
    snap.restore(&mut weights)?;
    let means = Snapshot::load(&dir.join("class_means.bin"))?;
    let [c, d] = means.config[..] else {
        return Err(Error::Format("class_means.bin needs two config fields".into()));
    };
    let data = means.arrays.into_iter().next().ok_or_else(|| Error::Format("class_means.bin is empty".into()))?.1;
    let class_means = Tensor::new(&[c as usize, d as usize], data)?;
    let mut text = TextEmbeddingSet::read_csv(fs::File::open(dir.join("text.csv"))?)?;
    text.templates = meta.templates;
    let bundle = FoundationBundle { config, weights, class_means, text, pretrain_accuracy: meta.pretrain_accuracy };
    if bundle.checksum() != meta.checksum || bundle.num_classes() != meta.classes {
        return Err(Error::Format("cached bundle does not match its checksum".into()));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NamedTensors;

    fn sample() -> NamedTensors {
        NamedTensors(vec![
            ("a".into(), Tensor::vector(vec![1.5, -2.0, f64::MIN_POSITIVE])),
            ("b.c".into(), Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()),
        ])
    }

    #[test]
    fn bytes_round_trip() {
        let s = Snapshot::capture(vec![3, 7], &sample());
        let back = Snapshot::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let mut target = sample();
        target.fill(0.0);
        back.restore(&mut target).unwrap();
        assert_eq!(target.checksum(), sample().checksum());
    }

    #[test]
    fn header_layout() {
        let b = Snapshot::capture(vec![9], &sample()).to_bytes();
        assert_eq!(&b[..8], b"LTADSNAP");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 9);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let b = Snapshot::capture(vec![], &sample()).to_bytes();
        assert!(Snapshot::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Snapshot::from_bytes(b"NOTASNAPxxxx").is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Snapshot::from_bytes(&extra).is_err());
        let mut wrong = NamedTensors(vec![("a".into(), Tensor::vector(vec![0.0; 3]))]);
        assert!(Snapshot::from_bytes(&b).unwrap().restore(&mut wrong).is_err());
    }

    #[test]
    fn file_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        Snapshot::capture(vec![1], &sample()).save(&p, sample().checksum()).unwrap();
        let m: Manifest = serde_json::from_slice(&fs::read(dir.path().join("x.bin.json")).unwrap()).unwrap();
        assert_eq!(m.arrays, vec![("a".to_string(), 3), ("b.c".to_string(), 4)]);
        assert_eq!(Snapshot::load(&p).unwrap().arrays.len(), 2);
    }

    #[test]
    fn encoder_config_fields_round_trip() {
        let cfg = EncoderConfig::default();
        assert_eq!(encoder_config_from_fields(&encoder_config_fields(&cfg)).unwrap(), cfg);
        assert!(encoder_config_from_fields(&[1, 2]).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let spec = crate::data::FoundationSpec { per_class: 10, epochs: 1, eval_per_class: 2, ..Default::default() };
        let b = crate::data::build_foundation(1, 3, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &b).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }
}
