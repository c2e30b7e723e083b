use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adapt::{AdaptBundle, AdaptConfig, CollapseMonitor};
use crate::adversary::{DiscConfig, DiscKind, DiscriminatorParams};
use crate::congruency::{BranchConfig, ReconBranchParams, ResidualBranchParams};
use crate::depthnet::{ArchConfig, NetworkParams, PartitionSpec};
use crate::error::{Error, Result};
use crate::evalkit::DepthModel;
use crate::nn::{ArrayRole, Optimizer, OptimizerConfig, ParamArray, ParamStore, PartitionTag};

pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Network,
    Adaptation,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
    tag: PartitionTag,
    role: ArrayRole,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverMeta {
    config: OptimizerConfig,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    kind: Kind,
    arch: ArchConfig,
    partition: PartitionSpec,
    /// Echo of the run configuration (adaptation runs only).
    config: Option<AdaptConfig>,
    iteration: u64,
    seed: u64,
    branch: Option<BranchConfig>,
    disc: Option<DiscConfig>,
    optimizers: BTreeMap<String, SolverMeta>,
    monitor: CollapseMonitor,
    arrays: Vec<ArrayMeta>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Writer {
    dir: PathBuf,
    arrays: Vec<ArrayMeta>,
}

impl Writer {
    fn group(&mut self, group: &str, store: &ParamStore<f32>) -> Result<()> {
        for (name, a) in store.iter() {
            let file = format!("{group}.{name}.f32");
            let mut bytes = Vec::with_capacity(a.data.len() * 4);
            for v in &a.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = self.dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            self.arrays.push(ArrayMeta {
                group: group.to_string(),
                name: name.clone(),
                shape: a.shape.clone(),
                tag: a.tag,
                role: a.role,
                file,
            });
        }
        Ok(())
    }
}

fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    // The version is checked before the rest of the layout is interpreted.
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(ckpt_err(&path, format!("version {v} is not supported (expected {CHECKPOINT_VERSION})")))
        }
        None => return Err(ckpt_err(&path, "missing version field")),
    }
    serde_json::from_value(raw).map_err(|e| ckpt_err(&path, e.to_string()))
}

/// Reads every array into per-group stores.
fn read_groups(dir: &Path, meta: &Meta) -> Result<BTreeMap<String, ParamStore<f32>>> {
    let mut groups: BTreeMap<String, ParamStore<f32>> = BTreeMap::new();
    for a in &meta.arrays {
        if a.file.contains('/') || a.file.contains('\\') || a.file.starts_with("..") {
            return Err(ckpt_err(dir, format!("array file name `{}` is not a plain file name", a.file)));
        }
        let path = dir.join(&a.file);
        let bytes = fs::read(&path).map_err(|e| ckpt_err(&path, format!("cannot read array file: {e}")))?;
        let len: usize = a.shape.iter().product();
        if bytes.len() != len * 4 {
            return Err(ckpt_err(
                &path,
                format!("expected {} bytes for shape {:?}, found {}", len * 4, a.shape, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        groups.entry(a.group.clone()).or_default().insert(
            a.name.clone(),
            ParamArray {
                shape: a.shape.clone(),
                data,
                tag: a.tag,
                role: a.role,
            },
        );
    }
    Ok(groups)
}

fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    let path = dir.join(META);
    let text = serde_json::to_string_pretty(meta).map_err(|e| ckpt_err(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a network (with its partition tags) to `dir`.
pub fn save_network(net: &NetworkParams<f32>, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut w = Writer {
        dir: dir.to_path_buf(),
        arrays: Vec::new(),
    };
    w.group("net", &net.store)?;
    write_meta(
        dir,
        &Meta {
            version: CHECKPOINT_VERSION,
            kind: Kind::Network,
            arch: net.arch.clone(),
            partition: net.partition,
            config: None,
            iteration: 0,
            seed: 0,
            branch: None,
            disc: None,
            optimizers: BTreeMap::new(),
            monitor: CollapseMonitor::default(),
            arrays: w.arrays,
        },
    )
}

/// Reads the network from either kind of checkpoint directory.
pub fn load_network(dir: &Path) -> Result<NetworkParams<f32>> {
    let meta = read_meta(dir)?;
    let mut groups = read_groups(dir, &meta)?;
    let store = groups.remove("net").ok_or_else(|| ckpt_err(dir, "no network arrays"))?;
    Ok(NetworkParams {
        arch: meta.arch,
        partition: meta.partition,
        store,
    })
}

/// Writes the full state of an adaptation run to `dir`.
pub fn checkpoint(bundle: &AdaptBundle, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut w = Writer {
        dir: dir.to_path_buf(),
        arrays: Vec::new(),
    };
    w.group("net", &bundle.net.store)?;
    w.group("disc_f", &bundle.disc_f.store)?;
    w.group("disc_y", &bundle.disc_y.store)?;
    let mut branch = None;
    if let Some(r) = &bundle.residual {
        w.group("residual", &r.store)?;
        branch = Some(r.config.clone());
    }
    if let Some(r) = &bundle.recon {
        w.group("recon", &r.store)?;
        branch = Some(r.config.clone());
    }
    let mut optimizers = BTreeMap::new();
    for (party, opt) in &bundle.optimizers {
        w.group(&format!("opt.{party}"), &opt.state)?;
        optimizers.insert(
            party.clone(),
            SolverMeta {
                config: opt.config,
                steps: opt.steps,
            },
        );
    }
    write_meta(
        dir,
        &Meta {
            version: CHECKPOINT_VERSION,
            kind: Kind::Adaptation,
            arch: bundle.net.arch.clone(),
            partition: bundle.net.partition,
            config: Some(bundle.config.clone()),
            iteration: bundle.iteration,
            seed: bundle.config.seed,
            branch,
            disc: Some(bundle.disc_f.config.clone()),
            optimizers,
            monitor: bundle.monitor.clone(),
            arrays: w.arrays,
        },
    )
}

/// Reads a state written by [`checkpoint`]. Nothing is returned unless every
/// array loads.
pub fn restore(dir: &Path) -> Result<AdaptBundle> {
    let meta = read_meta(dir)?;
    if meta.kind != Kind::Adaptation {
        return Err(ckpt_err(dir, "holds a network only, not an adaptation state"));
    }
    let mut groups = read_groups(dir, &meta)?;
    let mut take = |g: &str| groups.remove(g);
    let missing = |g: &str| ckpt_err(dir, format!("missing array group `{g}`"));
    let config = meta.config.ok_or_else(|| ckpt_err(dir, "missing config echo"))?;
    let disc = meta.disc.ok_or_else(|| ckpt_err(dir, "missing discriminator config"))?;
    let net = NetworkParams {
        arch: meta.arch,
        partition: meta.partition,
        store: take("net").ok_or_else(|| missing("net"))?,
    };
    let disc_f = DiscriminatorParams::from_store(
        DiscKind::Feature,
        disc.clone(),
        take("disc_f").ok_or_else(|| missing("disc_f"))?,
    );
    let disc_y = DiscriminatorParams::from_store(DiscKind::Depth, disc, take("disc_y").ok_or_else(|| missing("disc_y"))?);
    let branch_cfg = || meta.branch.clone().ok_or_else(|| ckpt_err(dir, "missing branch config"));
    let residual = match take("residual") {
        Some(store) => Some(ResidualBranchParams::from_store(branch_cfg()?, store)),
        None => None,
    };
    let recon = match take("recon") {
        Some(store) => Some(ReconBranchParams::from_store(branch_cfg()?, store)),
        None => None,
    };
    let mut optimizers = BTreeMap::new();
    for (party, s) in meta.optimizers {
        let state = take(&format!("opt.{party}")).unwrap_or_default();
        optimizers.insert(
            party,
            Optimizer {
                config: s.config,
                steps: s.steps,
                state,
            },
        );
    }
    Ok(AdaptBundle {
        config,
        net,
        residual,
        recon,
        disc_f,
        disc_y,
        optimizers,
        iteration: meta.iteration,
        monitor: meta.monitor,
    })
}

/// Evaluation model from either kind of checkpoint: the adapted network and
/// residual branch of an adaptation state, or a bare network.
pub fn load_model(dir: &Path) -> Result<DepthModel> {
    if read_meta(dir)?.kind == Kind::Adaptation {
        Ok(restore(dir)?.model())
    } else {
        Ok(DepthModel::new(load_network(dir)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthnet::init_network;

    #[test]
    fn network_round_trip_is_bit_exact() {
        let net = init_network::<f32>(3, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_network(&net, dir.path()).unwrap();
        let back = load_network(dir.path()).unwrap();
        assert_eq!(back.arch, net.arch);
        assert_eq!(back.partition, net.partition);
        assert!(back.store.bit_equal(&net.store));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let net = init_network::<f32>(3, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_network(&net, dir.path()).unwrap();
        let path = dir.path().join(META);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        assert!(matches!(load_network(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn truncated_array_is_rejected() {
        let net = init_network::<f32>(3, &ArchConfig::default(), PartitionSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_network(&net, dir.path()).unwrap();
        let file = dir.path().join("net.dec.out.weight.f32");
        let bytes = fs::read(&file).unwrap();
        fs::write(&file, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_network(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
