//! Flag/file merging, the resolved settings record, and the config hash
//! that names output directories and stamps every CSV.

use crate::{CliError, CliResult, CommonArgs};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// JSON config file shape: any subset of the flag set, same names as the
/// long flags (kebab-case). Flags given on the command line win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    graph: Option<PathBuf>,
    format: Option<String>,
    k: Option<usize>,
    rho: Option<usize>,
    z: Option<usize>,
    lambda_cut: Option<f64>,
    scales: Option<usize>,
    mode: Option<String>,
    aggregation: Option<String>,
    residual: Option<String>,
    admissible: Option<bool>,
    activation: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    out: Option<PathBuf>,
    evd_cache: Option<PathBuf>,
    filter: Option<PathBuf>,
    kernel: Option<String>,
    grid: Option<usize>,
    rho_list: Option<String>,
    task: Option<String>,
    n_nodes: Option<usize>,
    n_graphs: Option<usize>,
    depth: Option<usize>,
    width: Option<usize>,
    mlp_depth: Option<usize>,
    pe: Option<usize>,
    window: Option<String>,
    lambda_lp: Option<f64>,
    patience: Option<usize>,
    weight_decay: Option<f64>,
    warmup: Option<usize>,
    readout: Option<String>,
    source: Option<usize>,
}

/// Flags merged over the config file. Everything is still optional here;
/// commands pull what they need with defaults or requirements.
pub struct Merged(CommonArgs);

pub fn merge(args: &CommonArgs) -> CliResult<Merged> {
    let mut a = args.clone();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let f: FileConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        a.graph = a.graph.or(f.graph);
        a.format = a.format.or(f.format);
        a.k = a.k.or(f.k);
        a.rho = a.rho.or(f.rho);
        a.z = a.z.or(f.z);
        a.lambda_cut = a.lambda_cut.or(f.lambda_cut);
        a.scales = a.scales.or(f.scales);
        a.mode = a.mode.or(f.mode);
        a.aggregation = a.aggregation.or(f.aggregation);
        a.residual = a.residual.or(f.residual);
        a.admissible = a.admissible.or(f.admissible);
        a.activation = a.activation.or(f.activation);
        a.seed = a.seed.or(f.seed);
        a.epochs = a.epochs.or(f.epochs);
        a.lr = a.lr.or(f.lr);
        a.out = a.out.or(f.out);
        a.evd_cache = a.evd_cache.or(f.evd_cache);
        a.filter = a.filter.or(f.filter);
        a.kernel = a.kernel.or(f.kernel);
        a.grid = a.grid.or(f.grid);
        a.rho_list = a.rho_list.or(f.rho_list);
        a.task = a.task.or(f.task);
        a.n_nodes = a.n_nodes.or(f.n_nodes);
        a.n_graphs = a.n_graphs.or(f.n_graphs);
        a.depth = a.depth.or(f.depth);
        a.width = a.width.or(f.width);
        a.mlp_depth = a.mlp_depth.or(f.mlp_depth);
        a.pe = a.pe.or(f.pe);
        a.window = a.window.or(f.window);
        a.lambda_lp = a.lambda_lp.or(f.lambda_lp);
        a.patience = a.patience.or(f.patience);
        a.weight_decay = a.weight_decay.or(f.weight_decay);
        a.warmup = a.warmup.or(f.warmup);
        a.readout = a.readout.or(f.readout);
        a.source = a.source.or(f.source);
    }
    Ok(Merged(a))
}

impl std::ops::Deref for Merged {
    type Target = CommonArgs;
    fn deref(&self) -> &CommonArgs {
        &self.0
    }
}

/// The settings a command actually resolved, as an ordered key/value map.
/// Its serialization is hashed to name the run directory and is written
/// alongside the outputs as config.json.
pub struct Resolved {
    command: &'static str,
    map: BTreeMap<String, serde_json::Value>,
}

impl Resolved {
    pub fn new(command: &'static str) -> Self {
        let mut map = BTreeMap::new();
        map.insert("command".into(), serde_json::Value::String(command.into()));
        Resolved { command, map }
    }

    pub fn put(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.map.insert(key.into(), value.into());
        self
    }

    /// Floats go in as bit-exact hex so the hash never depends on decimal
    /// formatting.
    pub fn put_f64(&mut self, key: &str, value: f64) -> &mut Self {
        self.map.insert(
            key.into(),
            serde_json::Value::String(format!("{:016x}", value.to_bits())),
        );
        self
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.map).expect("BTreeMap serializes");
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..12].to_string()
    }

    /// Create `<out>/<command>-<hash>/`, write config.json into it, and
    /// return (directory, hash).
    pub fn make_run_dir(&self, out_root: &Path) -> CliResult<(PathBuf, String)> {
        let hash = self.hash();
        let dir = out_root.join(format!("{}-{}", self.command, hash));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let text = serde_json::to_string_pretty(&self.map).expect("BTreeMap serializes");
        write_file(&dir.join("config.json"), &text)?;
        Ok((dir, hash))
    }
}

/// Output root: --out flag, then $LONGWAVE_OUT, then ./runs.
pub fn out_root(merged: &Merged) -> PathBuf {
    if let Some(o) = &merged.out {
        return o.clone();
    }
    if let Ok(env) = std::env::var("LONGWAVE_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

pub fn write_file(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// CSV preamble: the config-hash comment plus the header row.
pub fn csv_header(hash: &str, columns: &str) -> String {
    format!("# config {hash}\n{columns}\n")
}
