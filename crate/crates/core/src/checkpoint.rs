//! Composite checkpoints: namespaced module trees, optimizer moments, the
//! step counter and a JSON config echo in one container.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::container::Container;
use crate::error::{Error, FormatError, Result};
use crate::optim::AdamState;
use crate::params::{EntryKind, ParameterTree};

pub const SAT2RAD: &str = "sat2rad";
pub const PHYDNET: &str = "phydnet";
pub const FUSION: &str = "fusion";
const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub modules: BTreeMap<String, ParameterTree<f32>>,
    /// Optimizer state of the module being trained, if any.
    pub optimizer: Option<(String, AdamState<f32>)>,
    pub step: u64,
    pub config: Value,
}

fn role(kind: EntryKind) -> &'static str {
    match kind {
        EntryKind::Param => "param",
        EntryKind::Buffer => "buffer",
    }
}

impl Checkpoint {
    pub fn module(&self, name: &str) -> Result<&ParameterTree<f32>> {
        self.modules
            .get(name)
            .ok_or_else(|| Error::MissingCheckpoint(format!("checkpoint holds no `{name}` parameters")))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (ns, tree) in &self.modules {
            for (path, e) in tree.iter() {
                c.insert(format!("{ns}/{path}"), role(e.kind), e.tensor.clone());
            }
        }
        let mut meta = json!({
            "kind": "checkpoint",
            "step": self.step,
            "modules": self.modules.keys().collect::<Vec<_>>(),
            "config": self.config,
        });
        if let Some((ns, st)) = &self.optimizer {
            for (path, m) in &st.m {
                c.insert(format!("{OPTIM_M}{ns}/{path}"), "optim_m", m.clone());
            }
            for (path, v) in &st.v {
                c.insert(format!("{OPTIM_V}{ns}/{path}"), "optim_v", v.clone());
            }
            meta["optimizer"] = json!({ "module": ns, "t": st.t });
        }
        c.metadata = meta;
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let manifest = |msg: &str| Error::Format(FormatError::Manifest(msg.to_string()));
        if c.metadata.get("kind").and_then(Value::as_str) != Some("checkpoint") {
            return Err(manifest("container is not a checkpoint"));
        }
        let step = c.metadata.get("step").and_then(Value::as_u64).ok_or_else(|| manifest("missing step"))?;
        let config = c.metadata.get("config").cloned().unwrap_or(Value::Null);
        let optim_meta = c.metadata.get("optimizer").cloned();

        let mut optimizer = optim_meta
            .map(|o| -> Result<_> {
                let ns = o.get("module").and_then(Value::as_str).ok_or_else(|| manifest("optimizer module"))?;
                let t = o.get("t").and_then(Value::as_u64).ok_or_else(|| manifest("optimizer t"))?;
                Ok((ns.to_string(), AdamState::<f32> { t, ..Default::default() }))
            })
            .transpose()?;

        let mut modules: BTreeMap<String, ParameterTree<f32>> = BTreeMap::new();
        for (name, d) in std::mem::take(&mut c.datasets) {
            let (store_m, rest) = if let Some(r) = name.strip_prefix(OPTIM_M) {
                (Some(true), r)
            } else if let Some(r) = name.strip_prefix(OPTIM_V) {
                (Some(false), r)
            } else {
                (None, name.as_str())
            };
            let (ns, path) = rest
                .split_once('/')
                .ok_or_else(|| manifest(&format!("dataset `{name}` lacks a module namespace")))?;
            match store_m {
                Some(is_m) => {
                    let (opt_ns, st) = optimizer
                        .as_mut()
                        .ok_or_else(|| manifest("optimizer moments without optimizer metadata"))?;
                    if opt_ns != ns {
                        return Err(manifest("optimizer moments for a different module"));
                    }
                    let map = if is_m { &mut st.m } else { &mut st.v };
                    map.insert(path.to_string(), d.tensor);
                }
                None => {
                    let kind = match d.role.as_str() {
                        "param" => EntryKind::Param,
                        "buffer" => EntryKind::Buffer,
                        r => return Err(manifest(&format!("dataset `{name}` has unknown role `{r}`"))),
                    };
                    modules.entry(ns.to_string()).or_default().insert(path, kind, d.tensor)?;
                }
            }
        }
        Ok(Self {
            modules,
            optimizer,
            step,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(format!("{} does not exist", path.display())));
        }
        Self::from_container(Container::read(path)?)
    }

    /// Loads only the listed modules, failing if any is absent.
    pub fn load_modules(path: impl AsRef<Path>, names: &[&str]) -> Result<BTreeMap<String, ParameterTree<f32>>> {
        let mut ck = Self::load(path)?;
        names
            .iter()
            .map(|n| {
                ck.module(n)?;
                Ok((n.to_string(), ck.modules.remove(*n).expect("checked")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{unet_init, UNetConfig};
    use wfn_tensor::Tensor;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint {
            step: 17,
            config: json!({"lr": 1e-3}),
            ..Default::default()
        };
        let tree = unet_init::<f32>(&UNetConfig::reduced(2, 1, &[2, 4]), 1).unwrap();
        let mut st = AdamState::default();
        st.t = 17;
        for (p, t) in tree.params() {
            st.m.insert(p.to_string(), t.map(|v| v * 0.5));
            st.v.insert(p.to_string(), t.map(|v| v * v));
        }
        ck.modules.insert(FUSION.into(), tree.clone());
        ck.modules.insert(SAT2RAD.into(), tree);
        ck.optimizer = Some((FUSION.into(), st));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.wfn");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.module(FUSION).unwrap().content_hash(), ck.module(FUSION).unwrap().content_hash());
        let again = dir.path().join("ck2.wfn");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn partial_load_and_missing_modules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.wfn");
        sample().save(&path).unwrap();
        let only = Checkpoint::load_modules(&path, &[SAT2RAD]).unwrap();
        assert_eq!(only.keys().collect::<Vec<_>>(), vec![SAT2RAD]);
        assert!(matches!(Checkpoint::load_modules(&path, &[PHYDNET]).unwrap_err(), Error::MissingCheckpoint(_)));
        assert!(matches!(Checkpoint::load(dir.path().join("nope")).unwrap_err(), Error::MissingCheckpoint(_)));
    }

    #[test]
    fn rejects_foreign_containers() {
        let mut c = Container::new();
        c.insert("satellite", "data", Tensor::zeros([1]));
        assert!(Checkpoint::from_container(c).is_err());
    }
}
