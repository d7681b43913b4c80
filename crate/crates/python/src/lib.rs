//! Python bindings: datasets, policy agents, adaptation, decoding and sweeps.

use std::collections::BTreeMap;
use std::path::PathBuf;

use metakgr::config::RunConfig;
use metakgr::env::{Env, Query};
use metakgr::eval::{beam_search, random_ranking_mrr as core_random_mrr, robustness_sweep};
use metakgr::kg::{Dataset, RelationId, Triple};
use metakgr::meta::MetaLearner;
use metakgr::policy::{render_path, PolicyNet};
use metakgr::synthetic::{compositional_kg, SyntheticConfig};
use metakgr::tensor::{Checkpoint, ParamSet};
use metakgr::Error;
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::UnknownName { .. } => PyKeyError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Config(_) | Error::ShapeMismatch { .. } => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for metakgr::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn config_from(settings: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    apply(&mut cfg, settings)?;
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, settings: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    if let Some(d) = settings {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if let Ok(b) = v.extract::<bool>() {
                b.to_string()
            } else {
                v.str()?.to_string()
            };
            cfg.set(&key, value).py()?;
        }
    }
    Ok(())
}

/// A knowledge graph with its train, valid and test triples.
#[pyclass(name = "Dataset", module = "metakgr_py", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (train, valid=None, test=None, add_inverses=true))]
    fn from_files(train: PathBuf, valid: Option<PathBuf>, test: Option<PathBuf>, add_inverses: bool) -> PyResult<Self> {
        let inner = Dataset::from_files(&train, valid.as_deref(), test.as_deref(), add_inverses).py()?;
        Ok(Self { inner })
    }

    /// Synthetic compositional graph. Returns `(dataset, threshold)` where the
    /// threshold separates normal from few-shot relations.
    #[staticmethod]
    #[pyo3(signature = (seed=0, entities=200, add_inverses=false))]
    fn synthetic(seed: u64, entities: usize, add_inverses: bool) -> PyResult<(Self, usize)> {
        let kg = compositional_kg(&SyntheticConfig {
            seed,
            entities,
            add_inverses,
            ..Default::default()
        })
        .py()?;
        Ok((Self { inner: kg.dataset }, kg.threshold))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::from_json(text).py()?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.inner.graph.num_entities()
    }

    #[getter]
    fn num_relations(&self) -> usize {
        self.inner.graph.num_forward_relations()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.graph.num_edges()
    }

    /// `(train, valid, test)` triple counts.
    fn counts(&self) -> (usize, usize, usize) {
        (self.inner.train.len(), self.inner.valid.len(), self.inner.test.len())
    }

    fn entity_names(&self) -> Vec<String> {
        self.inner.graph.entities().names().to_vec()
    }

    fn relation_names(&self) -> Vec<String> {
        let g = &self.inner.graph;
        g.relations().names()[..g.num_forward_relations()].to_vec()
    }

    /// Relations with fewer than `threshold` training triples are few-shot.
    /// Returns `{"normal": [...], "fewshot": [...]}` with relation names.
    fn split<'py>(&self, py: Python<'py>, threshold: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.split(threshold).py()?;
        let g = &self.inner.graph;
        let names = |rs: Vec<RelationId>| -> Vec<String> { rs.into_iter().map(|r| g.relation_name(r).to_string()).collect() };
        let d = PyDict::new(py);
        d.set_item("normal", names(s.normal.keys().copied().collect()))?;
        d.set_item("fewshot", names(s.fewshot.keys().copied().collect()))?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let (tr, va, te) = self.counts();
        format!(
            "Dataset(entities={}, relations={}, train={tr}, valid={va}, test={te})",
            self.num_entities(),
            self.num_relations()
        )
    }
}

impl PyDataset {
    fn training_triples(&self, r: RelationId) -> Vec<Triple> {
        self.inner.train.iter().filter(|t| t.relation == r).copied().collect()
    }
}

/// A path-walking policy with its parameters and run settings.
///
/// Settings are the CLI config keys (`dim`, `horizon`, `inner_lr`, ...).
#[pyclass(name = "Agent", module = "metakgr_py")]
struct PyAgent {
    net: PolicyNet,
    params: ParamSet,
    cfg: RunConfig,
}

#[pymethods]
impl PyAgent {
    #[new]
    #[pyo3(signature = (dataset, **settings))]
    fn new(dataset: &PyDataset, settings: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = config_from(settings)?;
        let net = PolicyNet::for_graph(cfg.policy_config().py()?, &dataset.inner.graph).py()?;
        let params = net.init(cfg.get("seed").py()?);
        Ok(Self { net, params, cfg })
    }

    /// Loads a policy checkpoint; settings other than the network sizes
    /// come from `settings`.
    #[staticmethod]
    #[pyo3(signature = (path, **settings))]
    fn load(path: PathBuf, settings: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        let (net, params) = PolicyNet::from_checkpoint(&ck).py()?;
        Ok(Self {
            net,
            params,
            cfg: config_from(settings)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut ck = self.net.to_checkpoint(&self.params);
        ck.seed = self.cfg.get("seed").py()?;
        ck.save(&path).py()
    }

    #[pyo3(signature = (**settings))]
    fn configure(&mut self, settings: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
        apply(&mut self.cfg, settings)
    }

    /// Current value of a setting, as text.
    fn setting(&self, key: &str) -> String {
        self.cfg.raw(key).to_string()
    }

    fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    /// `(shape, flat values)` of one parameter tensor.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.params.require(name).py()?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Meta-trains on the normal relations under `threshold` and replaces
    /// the parameters with the result. Returns the number of outer steps run.
    fn meta_train(&mut self, py: Python<'_>, dataset: &PyDataset, threshold: usize) -> PyResult<usize> {
        let d = &dataset.inner;
        let split = d.split(threshold).py()?;
        let meta = self.cfg.meta_config().py()?;
        let (net, init) = (&self.net, self.params.clone());
        let out = py
            .detach(|| {
                let learner = MetaLearner::new(net, &d.graph, None, meta)?;
                learner.meta_train(&split.normal, init, None, |_| {})
            })
            .py()?;
        self.params = out.params;
        Ok(out.steps_run)
    }

    /// A copy adapted to `relation`: on `support` name triples when given,
    /// otherwise on the relation's training triples.
    #[pyo3(signature = (dataset, relation, support=None, steps=None))]
    fn adapt(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        relation: &str,
        support: Option<Vec<(String, String, String)>>,
        steps: Option<usize>,
    ) -> PyResult<Self> {
        let g = &dataset.inner.graph;
        let r = g.relation_id(relation).py()?;
        let triples = match support {
            Some(ts) => ts
                .iter()
                .map(|(h, rel, t)| {
                    let tr = Triple::new(g.entity_id(h)?, g.relation_id(rel)?, g.entity_id(t)?);
                    if tr.relation != r {
                        return Err(Error::InvalidArgument(format!("support triple uses `{rel}`, not `{relation}`")));
                    }
                    Ok(tr)
                })
                .collect::<metakgr::Result<Vec<_>>>()
                .py()?,
            None => dataset.training_triples(r),
        };
        let steps = match steps {
            Some(s) => s,
            None => self.cfg.get("adapt_steps").py()?,
        };
        let meta = self.cfg.meta_config().py()?;
        let seed: u64 = self.cfg.get("seed").py()?;
        let params = py
            .detach(|| {
                let learner = MetaLearner::new(&self.net, g, None, meta)?;
                learner.adapt_fewshot(&self.params, &triples, steps, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .py()?;
        Ok(Self {
            net: self.net,
            params,
            cfg: self.cfg.clone(),
        })
    }

    /// Beam-searches `(source, relation, ?)`. Returns `(entity, score, path)`
    /// tuples, best first, with the path rendered as text.
    #[pyo3(signature = (dataset, source, relation, top_k=None))]
    fn explain(
        &self,
        dataset: &PyDataset,
        source: &str,
        relation: &str,
        top_k: Option<usize>,
    ) -> PyResult<Vec<(String, f64, String)>> {
        let g = &dataset.inner.graph;
        let e = g.entity_id(source).py()?;
        let r = g.relation_id(relation).py()?;
        let env = Env::new(g, self.cfg.env_config().py()?).py()?;
        let ans = beam_search(&self.net, &self.params, &env, &Query::new(e, r, None), &self.cfg.beam_config().py()?).py()?;
        let k = match top_k {
            Some(k) => k,
            None => self.cfg.get("top_k").py()?,
        };
        Ok(ans
            .candidates
            .iter()
            .take(k)
            .map(|c| (g.entity_name(c.entity).to_string(), c.score, render_path(g, e, &c.path)))
            .collect())
    }

    /// Adapts to every few-shot relation under each K in `k_list` and
    /// evaluates on its test triples. Returns one dict per K.
    fn sweep<'py>(&self, py: Python<'py>, dataset: &PyDataset, threshold: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let d = &dataset.inner;
        let split = d.split(threshold).py()?;
        let meta = self.cfg.meta_config().py()?;
        let sweep = self.cfg.sweep_config().py()?;
        let rows = py
            .detach(|| robustness_sweep(d, &split, &self.net, &self.params, None, &meta, &sweep))
            .py()?;
        rows.into_iter()
            .map(|(k, m)| {
                let row = PyDict::new(py);
                row.set_item("k", k.to_string())?;
                row.set_item("mrr", m.mrr)?;
                row.set_item("hits1", m.hits1)?;
                row.set_item("hits10", m.hits10)?;
                row.set_item("count", m.count)?;
                let per: BTreeMap<String, f64> = m
                    .per_relation
                    .iter()
                    .map(|(r, rm)| (d.graph.relation_name(*r).to_string(), rm.mrr))
                    .collect();
                row.set_item("per_relation_mrr", per)?;
                Ok(row)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        let c = self.net.config;
        format!(
            "Agent(dim={}, hidden={}, mlp_hidden={}, parameters={}, fingerprint={:016x})",
            c.dim,
            c.hidden,
            c.mlp_hidden,
            self.params.num_values(),
            self.params.fingerprint()
        )
    }
}

/// Expected MRR of a uniformly random ranking over `n` entities.
#[pyfunction]
fn random_ranking_mrr(n: usize) -> f64 {
    core_random_mrr(n)
}

/// Known configuration keys as `(key, default, description)`.
#[pyfunction]
fn config_keys() -> Vec<(&'static str, &'static str, &'static str)> {
    metakgr::config::KEYS.to_vec()
}

#[pymodule]
fn metakgr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(random_ranking_mrr, m)?)?;
    m.add_function(wrap_pyfunction!(config_keys, m)?)?;
    Ok(())
}
