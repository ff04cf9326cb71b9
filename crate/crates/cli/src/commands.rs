//! The seven subcommands. Each resolves its settings (flags over config
//! file over defaults), records them in a hashed config map, runs, and
//! writes into its own `<command>-<hash>` directory.

use crate::config::{csv_header, merge, out_root, write_file, Merged, Resolved};
use crate::{CliError, CliResult, CommonArgs};
use longwave::filters::{
    chebyshev_apply, chebyshev_response_at, constant_kernel, fit_chebyshev_ls, mexican_hat,
    response_with_correction, ChebCoeffs, FilterJson, HybridFilter, Kernel,
    propagation_energy_profile, FilterRole, SpectralParams, Window,
};
use longwave::graph::{load_graph, GraphFormat};
use longwave::network::{
    init_params, save_checkpoint, Activation, Aggregation, FilterMode, ModelConfig, ReadoutKind,
    ResidualMode,
};
use longwave::spectral::{
    dense_evd, load_evd_cache, partial_evd, save_evd_cache, DEFAULT_LANCZOS_TOL,
};
use longwave::training::{
    ablation_mask, evaluate, load_task, make_local_degree_task, make_path_localization_task,
    prepare_task, save_task, trace_csv, train, AdamWConfig, TaskKind, ToyTask, TrainConfig,
};
use longwave::{build_normalized_laplacian, Graph, Mat};
use std::path::Path;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone()
        .ok_or_else(|| usage(format!("missing required --{flag}")))
}

/// Load the graph named by --graph, format from --format or the file
/// extension. Input problems are usage errors; loader warnings go to
/// stderr.
fn load_input_graph(m: &Merged) -> CliResult<(Graph, String, String)> {
    let path = require(&m.graph, "graph")?;
    let format_name = m.format.clone().unwrap_or_else(|| {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => "json".into(),
            _ => "edge-list".into(),
        }
    });
    let format: GraphFormat = format_name.parse()?;
    let loaded = load_graph(&path, format, false).map_err(|e| match e {
        longwave::Error::Io { .. } => usage(e.to_string()),
        other => other.into(),
    })?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok((loaded.graph, path.display().to_string(), format_name))
}

/// Kernel spec `name[:param]`, e.g. `mexican:8` or `constant:1`.
fn parse_kernel(spec: &str) -> CliResult<(Kernel, f64)> {
    let (name, param) = match spec.split_once(':') {
        Some((n, p)) => (
            n,
            p.parse::<f64>()
                .map_err(|_| usage(format!("bad kernel parameter in {spec:?}")))?,
        ),
        None => (spec, f64::NAN),
    };
    match name {
        "mexican" => {
            let s = if param.is_nan() { 8.0 } else { param };
            if !(s > 0.0 && s.is_finite()) {
                return Err(usage(format!("mexican-hat scale must be positive, got {s}")));
            }
            Ok((mexican_hat(s), s))
        }
        "constant" => {
            let v = if param.is_nan() { 1.0 } else { param };
            if !v.is_finite() {
                return Err(usage(format!("constant kernel value must be finite, got {v}")));
            }
            Ok((constant_kernel(v), v))
        }
        other => Err(usage(format!(
            "unknown kernel {other:?} (expected mexican[:scale] or constant[:value])"
        ))),
    }
}

pub fn cmd_laplacian(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let (graph, gpath, gformat) = load_input_graph(&m)?;
    let lap = build_normalized_laplacian(&graph);

    let mut r = Resolved::new("laplacian");
    r.put("graph", gpath).put("format", gformat);
    let (dir, _hash) = r.make_run_dir(&out_root(&m))?;

    let degs = graph.degrees();
    let dmin = degs.iter().min().copied().unwrap_or(0);
    let dmax = degs.iter().max().copied().unwrap_or(0);
    let dmean = degs.iter().sum::<usize>() as f64 / degs.len().max(1) as f64;
    // Gershgorin: every eigenvalue sits within max row sum of |L|, which
    // for a normalized Laplacian cannot exceed 2.
    let mut gersh: f64 = 0.0;
    for i in 0..lap.dim() {
        let row_sum: f64 = lap.matrix().row_entries(i).map(|(_, v)| v.abs()).sum();
        gersh = gersh.max(row_sum);
    }

    let mut summary = std::collections::BTreeMap::new();
    summary.insert("n", serde_json::json!(graph.node_count()));
    summary.insert("m", serde_json::json!(graph.edge_count()));
    summary.insert("degree_min", serde_json::json!(dmin));
    summary.insert("degree_max", serde_json::json!(dmax));
    summary.insert("degree_mean", serde_json::json!(dmean));
    summary.insert("gershgorin_max", serde_json::json!(gersh));
    summary.insert("lambda_max_bound", serde_json::json!(2.0));
    summary.insert(
        "spectral_bound_ok",
        serde_json::json!(gersh <= 2.0 + 1e-12),
    );
    let text = serde_json::to_string_pretty(&summary).expect("map serializes");
    let out_path = dir.join("summary.json");
    write_file(&out_path, &text)?;
    println!(
        "laplacian: n={} m={} degree range [{dmin}, {dmax}]",
        graph.node_count(),
        graph.edge_count()
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn cmd_evd(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let (graph, gpath, gformat) = load_input_graph(&m)?;
    let lap = build_normalized_laplacian(&graph);
    let n = lap.dim();
    let k = m.k.unwrap_or(8);
    if k == 0 || k > n {
        return Err(usage(format!("k = {k} outside [1, {n}]")));
    }
    let seed = m.seed.unwrap_or(0);
    let tol = DEFAULT_LANCZOS_TOL;
    let hash = graph.content_hash();

    let mut r = Resolved::new("evd");
    r.put("graph", gpath)
        .put("format", gformat)
        .put("graph_hash", hash.clone())
        .put("k", k)
        .put("seed", seed);
    r.put_f64("tol", tol);
    let (dir, cfg_hash) = r.make_run_dir(&out_root(&m))?;

    let evd = match &m.evd_cache {
        Some(cache_path) if cache_path.exists() => match load_evd_cache(cache_path) {
            Ok(cached) if cached.serves(&hash, k, tol, seed) => {
                eprintln!("evd cache hit: {}", cache_path.display());
                cached.evd
            }
            Ok(_) => {
                eprintln!("evd cache stale, recomputing: {}", cache_path.display());
                let evd = partial_evd(&lap, k, tol, 4 * n + 64, seed)?;
                save_evd_cache(cache_path, &evd, tol, seed, &hash)?;
                evd
            }
            Err(e) => {
                eprintln!("evd cache unreadable ({e}), recomputing");
                let evd = partial_evd(&lap, k, tol, 4 * n + 64, seed)?;
                save_evd_cache(cache_path, &evd, tol, seed, &hash)?;
                evd
            }
        },
        Some(cache_path) => {
            let evd = partial_evd(&lap, k, tol, 4 * n + 64, seed)?;
            save_evd_cache(cache_path, &evd, tol, seed, &hash)?;
            eprintln!("evd cache written: {}", cache_path.display());
            evd
        }
        None => partial_evd(&lap, k, tol, 4 * n + 64, seed)?,
    };

    let mut csv = csv_header(&cfg_hash, "index,lambda,residual");
    println!("index lambda residual");
    for i in 0..k.min(evd.k) {
        csv.push_str(&format!(
            "{},{},{}\n",
            i, evd.lambdas[i], evd.residual_norms[i]
        ));
        println!("{} {} {}", i, evd.lambdas[i], evd.residual_norms[i]);
    }
    let out_path = dir.join("residuals.csv");
    write_file(&out_path, &csv)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn filter_from_file(path: &Path) -> CliResult<HybridFilter> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read filter {}: {e}", path.display())))?;
    let j: FilterJson = serde_json::from_str(&text)
        .map_err(|e| usage(format!("bad filter json {}: {e}", path.display())))?;
    Ok(HybridFilter::from_json(&j)?)
}

pub fn cmd_filter_response(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let grid = m.grid.unwrap_or(201);
    if grid < 2 {
        return Err(usage(format!("response grid needs at least 2 points, got {grid}")));
    }

    let (filter, source) = match &m.filter {
        Some(path) => (filter_from_file(path)?, path.display().to_string()),
        None => {
            // Flag-built default: identity polynomial, zero spectral
            // weights, one output channel.
            let rho = m.rho.unwrap_or(3);
            let z = m.z.unwrap_or(4);
            let lambda_cut = m.lambda_cut.unwrap_or(0.5);
            let window: Window = m.window.as_deref().unwrap_or("cosine").parse()?;
            let admissible = m.admissible.unwrap_or(false);
            let f = HybridFilter {
                cheb: ChebCoeffs::delta(rho),
                spec: SpectralParams::new(z, lambda_cut, Mat::zeros(z, 1), window)?,
                admissible,
                role: if admissible {
                    FilterRole::Wavelet
                } else {
                    FilterRole::Scaling
                },
            };
            (f, "flags".to_string())
        }
    };

    let fj = filter.to_json();
    let mut r = Resolved::new("filter-response");
    r.put("filter", source)
        .put("grid", grid)
        .put("rho", fj.rho)
        .put("z", fj.z)
        .put("window", format!("{}", fj.window))
        .put("admissible", fj.admissible)
        .put(
            "role",
            match fj.role {
                FilterRole::Scaling => "scaling",
                FilterRole::Wavelet => "wavelet",
            },
        );
    r.put_f64("lambda_cut", fj.lambda_cut);
    let (dir, cfg_hash) = r.make_run_dir(&out_root(&m))?;

    let d = filter.spec.dim_out();
    let corr = filter.correction(false);
    let mut cols = String::from("lambda,poly");
    for c in 0..d {
        cols.push_str(&format!(",resp_{c}"));
    }
    let mut csv = csv_header(&cfg_hash, &cols);
    for g in 0..grid {
        let lambda = 2.0 * g as f64 / (grid - 1) as f64;
        let poly = chebyshev_response_at(&filter.cheb, lambda)?;
        let resp = response_with_correction(&filter, 1.0, lambda, corr)?;
        csv.push_str(&format!("{lambda},{poly}"));
        for v in &resp {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let out_path = dir.join("response.csv");
    write_file(&out_path, &csv)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn cmd_propagate(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let (graph, gpath, gformat) = load_input_graph(&m)?;
    let lap = build_normalized_laplacian(&graph);
    let n = lap.dim();

    let kernel_spec = m.kernel.clone().unwrap_or_else(|| "mexican:8".into());
    let (kernel, kernel_param) = parse_kernel(&kernel_spec)?;
    let rho = m.rho.unwrap_or(8);
    let k = m.k.unwrap_or(12);
    if k == 0 || k > n {
        return Err(usage(format!("k = {k} outside [1, {n}]")));
    }
    let grid = m.grid.unwrap_or(512);
    let source = m.source.unwrap_or(0);
    if source >= n {
        return Err(usage(format!("source node {source} outside [0, {n})")));
    }
    let seed = m.seed.unwrap_or(0);

    let mut r = Resolved::new("propagate");
    r.put("graph", gpath)
        .put("format", gformat)
        .put("kernel", kernel_spec.clone())
        .put("rho", rho)
        .put("k", k)
        .put("grid", grid)
        .put("source", source)
        .put("seed", seed);
    r.put_f64("kernel_param", kernel_param);
    let (dir, cfg_hash) = r.make_run_dir(&out_root(&m))?;

    let (cheb, fit_err) = fit_chebyshev_ls(&kernel, rho, grid)?;
    let dense = dense_evd(&lap)?;
    let evd = partial_evd(&lap, k, DEFAULT_LANCZOS_TOL, 4 * n + 64, seed)?;

    let poly_profile =
        propagation_energy_profile(|x| chebyshev_apply(&cheb, &lap, x), &graph, source)?;
    let dense_profile = propagation_energy_profile(
        |x| Ok(longwave::filters::exact_filter_apply(&kernel, &dense, x)),
        &graph,
        source,
    )?;
    // Hybrid: polynomial fit plus the exact low-frequency residual inside
    // the retained subspace, the decomposition the filters realize.
    let hybrid_profile = propagation_energy_profile(
        |x| {
            let mut out = chebyshev_apply(&cheb, &lap, x)?;
            let mut xhat = evd.u.matmul_tn(x);
            for u in 0..evd.k {
                let resid = kernel.eval(evd.lambdas[u])
                    - chebyshev_response_at(&cheb, evd.lambdas[u])?;
                for c in 0..xhat.cols() {
                    let v = xhat.get(u, c) * resid;
                    xhat.set(u, c, v);
                }
            }
            out.add_assign(&evd.u.matmul(&xhat));
            Ok(out)
        },
        &graph,
        source,
    )?;

    let normalize = |p: &[f64]| -> Vec<f64> {
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter().map(|v| v / total).collect()
        } else {
            vec![0.0; p.len()]
        }
    };
    let (pp, dp, hp) = (
        normalize(&poly_profile),
        normalize(&dense_profile),
        normalize(&hybrid_profile),
    );

    let mut csv = csv_header(&cfg_hash, "hop,poly,dense,hybrid");
    for h in 0..pp.len() {
        csv.push_str(&format!("{},{},{},{}\n", h, pp[h], dp[h], hp[h]));
    }
    let out_path = dir.join("propagation.csv");
    write_file(&out_path, &csv)?;

    let tail = |p: &[f64], from: usize| -> f64 { p.iter().skip(from).sum() };
    println!(
        "fit sup error (rho={rho}): {fit_err}\nenergy beyond hop 20: poly={} dense={} hybrid={}",
        tail(&pp, 21),
        tail(&dp, 21),
        tail(&hp, 21)
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn cmd_fit_cheb(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let kernel_spec = m.kernel.clone().unwrap_or_else(|| "mexican:8".into());
    let (kernel, kernel_param) = parse_kernel(&kernel_spec)?;
    let grid = m.grid.unwrap_or(512);
    let rho_list_text = m.rho_list.clone().unwrap_or_else(|| "10,20,50".into());
    let rhos: Vec<usize> = rho_list_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad polynomial order {s:?} in --rho-list")))
        })
        .collect::<CliResult<_>>()?;
    if rhos.is_empty() {
        return Err(usage("--rho-list is empty"));
    }

    let mut r = Resolved::new("fit-cheb");
    r.put("kernel", kernel_spec.clone())
        .put("grid", grid)
        .put("rho_list", rho_list_text.clone());
    r.put_f64("kernel_param", kernel_param);
    let (dir, cfg_hash) = r.make_run_dir(&out_root(&m))?;

    let mut csv = csv_header(&cfg_hash, "rho,sup_error");
    println!("rho sup_error");
    for &rho in &rhos {
        let (_, err) = fit_chebyshev_ls(&kernel, rho, grid)?;
        csv.push_str(&format!("{rho},{err}\n"));
        println!("{rho} {err}");
    }
    let out_path = dir.join("fit.csv");
    write_file(&out_path, &csv)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

/// Everything train and ablate share: the task, the model config, and the
/// training schedule, all recorded in the resolved map.
struct TrainSetup {
    task: ToyTask,
    model: ModelConfig,
    train_cfg: TrainConfig,
    seed: u64,
}

fn resolve_train(m: &Merged, r: &mut Resolved) -> CliResult<TrainSetup> {
    let task_spec = m.task.clone().unwrap_or_else(|| "path".into());
    let seed = m.seed.unwrap_or(0);
    let n_graphs = m.n_graphs.unwrap_or(6);
    let task = match task_spec.as_str() {
        "path" => {
            let n_nodes = m.n_nodes.unwrap_or(64);
            r.put("n_nodes", n_nodes);
            make_path_localization_task(n_nodes, n_graphs, seed)?
        }
        "degree" => make_local_degree_task(n_graphs, seed)?,
        file => load_task(Path::new(file)).map_err(|e| match e {
            longwave::Error::Io { .. } => usage(format!(
                "task {file:?} is not path, degree, or a readable task file: {e}"
            )),
            other => other.into(),
        })?,
    };
    r.put("task", task_spec.clone()).put("n_graphs", n_graphs);

    let readout = match &m.readout {
        Some(s) => s.parse()?,
        None => match task.kind {
            TaskKind::GraphClassification => ReadoutKind::MeanPool,
            _ => ReadoutKind::NodeIdentity,
        },
    };
    let model = ModelConfig {
        d_in: task.feature_dim(),
        pe_count: m.pe.unwrap_or(2),
        d: m.width.unwrap_or(8),
        d_out: task.output_dim(),
        depth: m.depth.unwrap_or(2),
        mlp_depth: m.mlp_depth.unwrap_or(1),
        j: m.scales.unwrap_or(2),
        rho: m.rho.unwrap_or(3),
        z: m.z.unwrap_or(4),
        lambda_cut: m.lambda_cut.unwrap_or(0.5),
        window: m.window.as_deref().unwrap_or("cosine").parse()?,
        mode: m.mode.as_deref().unwrap_or("independent").parse()?,
        lambda_lp: m.lambda_lp.unwrap_or(1.0),
        aggregation: m.aggregation.as_deref().unwrap_or("sum").parse()?,
        residual: m.residual.as_deref().unwrap_or("standard").parse()?,
        activation: m.activation.as_deref().unwrap_or("relu").parse()?,
        admissible: m.admissible.unwrap_or(true),
        readout,
    };
    model.validate()?;

    let lr = m.lr.unwrap_or(3e-3);
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(usage(format!("learning rate must be positive, got {lr}")));
    }
    let weight_decay = m.weight_decay.unwrap_or(0.0);
    let train_cfg = TrainConfig {
        epochs: m.epochs.unwrap_or(50),
        optimizer: AdamWConfig {
            lr,
            weight_decay,
            warmup_steps: m.warmup,
            ..AdamWConfig::default()
        },
        patience: m.patience.unwrap_or(20),
        k: m.k.unwrap_or(8),
        pe_count: m.pe.unwrap_or(2),
        mask: vec![],
        seed,
    };

    r.put("pe", model.pe_count)
        .put("width", model.d)
        .put("depth", model.depth)
        .put("mlp_depth", model.mlp_depth)
        .put("scales", model.j)
        .put("rho", model.rho)
        .put("z", model.z)
        .put("window", format!("{}", model.window))
        .put(
            "mode",
            match model.mode {
                FilterMode::Independent => "independent",
                FilterMode::Shared => "shared",
            },
        )
        .put(
            "aggregation",
            match model.aggregation {
                Aggregation::Sum => "sum",
                Aggregation::ConcatProject => "concat-project",
            },
        )
        .put(
            "residual",
            match model.residual {
                ResidualMode::Standard => "standard",
                ResidualMode::Wavelet => "wavelet",
                ResidualMode::None => "none",
            },
        )
        .put(
            "activation",
            match model.activation {
                Activation::Relu => "relu",
                Activation::Identity => "identity",
            },
        )
        .put(
            "readout",
            match model.readout {
                ReadoutKind::NodeIdentity => "node-identity",
                ReadoutKind::MeanPool => "mean-pool",
            },
        )
        .put("admissible", model.admissible)
        .put("seed", seed)
        .put("epochs", train_cfg.epochs)
        .put("patience", train_cfg.patience)
        .put("k", train_cfg.k)
        .put("warmup", m.warmup.map(|w| w as i64).unwrap_or(-1));
    r.put_f64("lambda_cut", model.lambda_cut);
    r.put_f64("lambda_lp", model.lambda_lp);
    r.put_f64("lr", lr);
    r.put_f64("weight_decay", weight_decay);

    Ok(TrainSetup {
        task,
        model,
        train_cfg,
        seed,
    })
}

pub fn cmd_train(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let mut r = Resolved::new("train");
    let setup = resolve_train(&m, &mut r)?;
    let (dir, cfg_hash) = r.make_run_dir(&out_root(&m))?;

    save_task(&dir.join("task.json"), &setup.task)?;
    let params = init_params(&setup.model, setup.seed)?;
    let outcome = train(params, &setup.task, &setup.train_cfg)?;

    let mut csv = format!("# config {cfg_hash}\n");
    csv.push_str(&trace_csv(&outcome.trace));
    write_file(&dir.join("trace.csv"), &csv)?;
    save_checkpoint(&dir.join("checkpoint.json"), &outcome.params)?;

    if let Some(last) = outcome.trace.last() {
        println!(
            "train: {} epochs, best val loss {}, final val metric {}",
            outcome.trace.len(),
            outcome.best_val_loss,
            last.val_metric
        );
    } else {
        println!("train: 0 epochs, checkpoint is the initialization");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn cmd_ablate(args: &CommonArgs) -> CliResult<()> {
    let m = merge(args)?;
    let mut r = Resolved::new("ablate");
    let setup = resolve_train(&m, &mut r)?;
    let (dir, cfg_hash) = r.make_run_dir(&out_root(&m))?;

    save_task(&dir.join("task.json"), &setup.task)?;
    let prepared = prepare_task(&setup.task, setup.train_cfg.k, setup.train_cfg.seed)?;
    let eval_idx: &[usize] = if setup.task.val_idx.is_empty() {
        &setup.task.train_idx
    } else {
        &setup.task.val_idx
    };

    let mut summary = csv_header(&cfg_hash, "variant,best_val_loss,val_metric");
    println!("variant best_val_loss val_metric");
    for variant in ["full", "no-spectral", "no-spatial"] {
        let mut cfg = setup.train_cfg.clone();
        cfg.mask = ablation_mask(variant)?;
        let params = init_params(&setup.model, setup.seed)?;
        let outcome = train(params, &setup.task, &cfg)?;

        let mut csv = format!("# config {cfg_hash}\n");
        csv.push_str(&trace_csv(&outcome.trace));
        write_file(&dir.join(format!("trace-{variant}.csv")), &csv)?;
        save_checkpoint(&dir.join(format!("checkpoint-{variant}.json")), &outcome.params)?;

        let (val_loss, val_metric) = evaluate(
            &outcome.params,
            &setup.task,
            &prepared,
            eval_idx,
            cfg.pe_count,
        )?;
        summary.push_str(&format!("{variant},{val_loss},{val_metric}\n"));
        println!("{variant} {val_loss} {val_metric}");
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    println!("wrote {}", dir.display());
    Ok(())
}
