use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use gridtwin_core::bench::{bench_inference, comparison_episodes, episodic_comparison, write_episodic_csv};
use gridtwin_core::dataset::{
    build_agent_dataset, build_generative_dataset, evaluate_one_step, fit_baseline, BaselineKind, BaselineRegressor,
    DatasetKind, TransitionDataset, TransitionModel,
};
use gridtwin_core::env::GridModel;
use gridtwin_core::grid::{load_network_spec, NetworkSpec};
use gridtwin_core::pinn::{
    des_held_out_mae, generator_held_out_mae, power_balance_accuracy, train_des_net, train_generator_net,
    train_power_balance_net, Surrogate, SurrogateBundle, TrainOutcome,
};
use gridtwin_core::powerflow::build_admittance;
use gridtwin_core::rl::{random_policy_return, sweep_structural_params, train_policy, Policy, TrainEnv, TrainRunRecord};
use gridtwin_core::terminal::{build_terminal_dataset, fit_gbt};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{Command, Common};

const SURROGATE_FILE: &str = "surrogate.ckpt";
const EXPERT_FILE: &str = "policy-oracle.ckpt";
const BASELINE_KINDS: [BaselineKind; 2] = [BaselineKind::Linear, BaselineKind::Mlp];
const DATASET_KINDS: [DatasetKind; 2] = [DatasetKind::Generative, DatasetKind::Agent];

struct Run {
    cfg: ExperimentConfig,
    spec: Arc<NetworkSpec>,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn wrote(&mut self, name: impl Into<String>) {
        let name = name.into();
        eprintln!("wrote {}", self.out.join(&name).display());
        self.outputs.push(name);
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.wrote(name);
        Ok(())
    }

    fn require(&self, name: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("{} is missing; run `gridtwin {hint} --out {}` first", p.display(), self.out.display());
        }
        Ok(p)
    }

    fn surrogate(&self) -> Result<Surrogate> {
        let p = self.require(SURROGATE_FILE, "train-surrogate")?;
        Ok(Surrogate::new(self.spec.clone(), &SurrogateBundle::load(p)?)?)
    }

    fn baseline(&self, name: &str) -> Result<BaselineRegressor> {
        let p = self.require(&format!("baselines/{name}.ckpt"), "fit-baselines")?;
        Ok(BaselineRegressor::load(p)?)
    }

    fn dataset_kinds(common: &Common) -> Result<Vec<DatasetKind>> {
        match &common.dataset_kind {
            Some(k) => Ok(vec![k.parse()?]),
            None => Ok(DATASET_KINDS.to_vec()),
        }
    }
}

fn baseline_name(kind: BaselineKind, data: DatasetKind) -> String {
    let k = match kind {
        BaselineKind::Linear => "linear",
        BaselineKind::Mlp => "mlp",
    };
    format!("{k}-{data}")
}

pub fn run(cmd: &Command, common: &Common) -> Result<()> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_seed(common.seed);
    if let Some(n) = common.n_envs {
        cfg.ppo.n_envs = n;
    }
    if let Some(b) = common.buffer_size {
        cfg.ppo.buffer_size = b;
    }
    if let Some(h) = common.horizon {
        cfg.ppo.horizon = h;
        cfg.ppo.eval_horizon = h;
        cfg.datasets.horizon = h;
    }
    let spec = Arc::new(match &cfg.network {
        Some(p) => load_network_spec(p)?,
        None => NetworkSpec::default_anm6(),
    });
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let mut run = Run {
        cfg,
        spec,
        out: common.out.clone(),
        outputs: vec![],
    };
    let name = match cmd {
        Command::TrainSurrogate => {
            train_surrogate(&mut run)?;
            "train-surrogate".to_string()
        }
        Command::GenDatasets => {
            gen_datasets(&mut run, &Run::dataset_kinds(common)?)?;
            "gen-datasets".into()
        }
        Command::FitBaselines => {
            fit_baselines(&mut run, &Run::dataset_kinds(common)?)?;
            "fit-baselines".into()
        }
        Command::TrainPolicy { env } => {
            train_policy_cmd(&mut run, env)?;
            format!("train-policy-{env}")
        }
        Command::Sweep { env } => {
            sweep(&mut run, env)?;
            format!("sweep-{env}")
        }
        Command::EpisodicMae => {
            episodic(&mut run)?;
            "episodic-mae".into()
        }
        Command::Bench => {
            bench(&mut run)?;
            "bench".into()
        }
    };
    write_manifest(&mut run, &name, common)
}

fn write_manifest(run: &mut Run, name: &str, common: &Common) -> Result<()> {
    let resolved = run.cfg.to_toml();
    let hash = Sha256::digest(resolved.as_bytes());
    let manifest = json!({
        "command": name,
        "seed": common.seed,
        "config_sha256": hash.iter().map(|b| format!("{b:02x}")).collect::<String>(),
        "config": resolved,
        "versions": { "gridtwin": env!("CARGO_PKG_VERSION") },
        "outputs": run.outputs,
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    run.write(&format!("manifest-{name}.json"), &text)
}

fn train_surrogate(run: &mut Run) -> Result<()> {
    let spec = run.spec.clone();
    let sc = run.cfg.surrogate.clone();
    let adm = build_admittance(&spec);
    let mut timing = String::from("net,steps,elapsed_s\n");
    let mut log = |name: &str, o: &TrainOutcome, run: &mut Run| -> Result<()> {
        o.write_history_csv(run.path(&format!("loss-{name}.csv")))?;
        run.wrote(format!("loss-{name}.csv"));
        timing.push_str(&format!("{name},{},{}\n", o.history.len(), o.elapsed_s));
        eprintln!("{name}: {} steps, best smoothed loss {:.3e}", o.history.len(), o.best_loss);
        Ok(())
    };
    let gen = train_generator_net(&spec, &sc.gen, None)?;
    log("gen", &gen, run)?;
    let des = train_des_net(&spec, &sc.des, None)?;
    log("des", &des, run)?;
    let pb = train_power_balance_net(&spec, &adm, &sc.pb, None)?;
    log("pb", &pb, run)?;

    let t0 = std::time::Instant::now();
    let td = build_terminal_dataset(&spec, sc.terminal_rows, sc.terminal_horizon, sc.gbt.seed)?;
    let (train, test) = td.split(sc.terminal_test_frac, sc.gbt.seed);
    let gbt = fit_gbt(train.x.view(), &train.y, &sc.gbt)?;
    let acc = gbt.accuracy(test.x.view(), &test.y);
    timing.push_str(&format!("terminal,{},{}\n", td.y.len(), t0.elapsed().as_secs_f64()));

    let n = sc.eval_points;
    let gen_mae = generator_held_out_mae(&spec, &gen.checkpoint.model, n)?;
    let des_mae = des_held_out_mae(&spec, &des.checkpoint.model, n)?;
    let v = power_balance_accuracy(&spec, &adm, &pb.checkpoint.model, n.min(500))?;
    let pb_drop = pb.history[0] / pb.best_loss;
    let bundle = SurrogateBundle {
        gen_net: Some(gen.checkpoint),
        des_net: Some(des.checkpoint),
        pb_net: Some(pb.checkpoint),
        terminal: Some(gbt),
    };
    bundle.save(run.path(SURROGATE_FILE))?;
    run.wrote(SURROGATE_FILE);
    let fidelity = format!(
        "metric,value\ngen_mae,{gen_mae}\ndes_mae,{des_mae}\nv_mag_mae,{}\nv_ang_mae,{}\npb_loss_drop,{}\n\
         terminal_accuracy,{acc}\nterminal_collapse_rate,{}\n",
        v.v_mag_mae,
        v.v_ang_mae,
        pb_drop,
        td.collapse_rate
    );
    run.write("fidelity.csv", &fidelity)?;
    run.write("timing-train-surrogate.csv", &timing)
}

fn dataset_path(kind: DatasetKind) -> String {
    format!("datasets/{kind}.csv")
}

fn gen_datasets(run: &mut Run, kinds: &[DatasetKind]) -> Result<()> {
    std::fs::create_dir_all(run.path("datasets"))?;
    let (n, h, seed) = (run.cfg.datasets.rows, run.cfg.datasets.horizon, run.cfg.baselines.seed);
    for &k in kinds {
        let d = match k {
            DatasetKind::Generative => build_generative_dataset(&run.spec, n, seed)?,
            DatasetKind::Agent => build_agent_dataset(&run.spec, n, h, seed)?,
        };
        d.write_csv(run.path(&dataset_path(k)), &run.spec)?;
        run.wrote(dataset_path(k));
    }
    Ok(())
}

fn fit_baselines(run: &mut Run, kinds: &[DatasetKind]) -> Result<()> {
    std::fs::create_dir_all(run.path("baselines"))?;
    // One-step metrics on a fresh agent-based hold-out set.
    let hold = build_agent_dataset(&run.spec, 2000, run.cfg.datasets.horizon, run.cfg.baselines.seed ^ 0xA5A5)?;
    let mut metrics = String::from("model,r2_mean,mae_mean\n");
    for &dk in kinds {
        let p = run.require(&dataset_path(dk), "gen-datasets")?;
        let data = TransitionDataset::read_csv(p, &run.spec, dk)?;
        for bk in BASELINE_KINDS {
            let name = baseline_name(bk, dk);
            let m = fit_baseline(&run.spec, bk, &data, &run.cfg.baselines)?;
            let e = evaluate_one_step(&run.spec, &m, &hold)?;
            metrics.push_str(&format!("{name},{},{}\n", e.r2_mean, e.mae_mean));
            m.save(run.path(&format!("baselines/{name}.ckpt")))?;
            run.wrote(format!("baselines/{name}.ckpt"));
        }
    }
    run.write("baselines/one-step.csv", &metrics)
}

fn train_env(run: &Run, env: &str) -> Result<TrainEnv> {
    Ok(match env {
        "oracle" => TrainEnv::Oracle,
        "pinn" => TrainEnv::Pinn(Arc::new(run.surrogate()?)),
        other => TrainEnv::Baseline(Arc::new(run.baseline(other)?)),
    })
}

fn write_record(run: &mut Run, stem: &str, rec: &TrainRunRecord) -> Result<()> {
    let mut metrics = String::from("update,eval_reward,energy_loss,transitions\n");
    let mut timing = String::from("update,wall_time_s\n");
    for u in &rec.updates {
        metrics.push_str(&format!("{},{},{},{}\n", u.update, u.eval_reward, u.energy_loss, u.transitions));
        timing.push_str(&format!("{},{}\n", u.update, u.wall_time_s));
    }
    run.write(&format!("{stem}.csv"), &metrics)?;
    run.write(&format!("timing-{stem}.csv"), &timing)
}

fn train_policy_cmd(run: &mut Run, env: &str) -> Result<()> {
    let te = train_env(run, env)?;
    let cfg = run.cfg.ppo;
    let (policy, rec) = train_policy(run.spec.clone(), &te, &cfg)?;
    policy.save(run.path(&format!("policy-{env}.ckpt")))?;
    run.wrote(format!("policy-{env}.ckpt"));
    write_record(run, &format!("training-{env}"), &rec)?;
    let model = GridModel::new(run.spec.clone());
    let random = random_policy_return(&model, cfg.eval_horizon, 20, cfg.seed)?;
    let summary = format!(
        "metric,value\nbest_eval,{}\nbest_update,{}\nupdates,{}\nstopped_early,{}\nrandom_eval,{random}\n",
        rec.best_eval,
        rec.best_update,
        rec.updates.len(),
        rec.stopped_early
    );
    eprintln!("best eval {:.2} (random {random:.2})", rec.best_eval);
    run.write(&format!("training-{env}-summary.csv"), &summary)
}

fn sweep(run: &mut Run, env: &str) -> Result<()> {
    let te = train_env(run, env)?;
    let grid: Vec<(usize, usize)> = run
        .cfg
        .sweep
        .n_envs
        .iter()
        .flat_map(|&e| run.cfg.sweep.buffer_sizes.iter().map(move |&b| (e, b)))
        .collect();
    let res = sweep_structural_params(run.spec.clone(), &te, &grid, &run.cfg.ppo)?;
    let mut rows = String::from("n_envs,buffer_size,mean_last10_reward\n");
    let mut timing = String::from("n_envs,buffer_size,total_time_s\n");
    for r in &res.rows {
        rows.push_str(&format!("{},{},{}\n", r.n_envs, r.buffer_size, r.mean_last10_reward));
        timing.push_str(&format!("{},{},{}\n", r.n_envs, r.buffer_size, r.total_time_s));
    }
    let c = res.correlations;
    timing.push_str(&format!(
        "# corr buffer/reward {} n_envs/reward {} buffer/time {} n_envs/time {}\n",
        c.buffer_vs_reward, c.n_envs_vs_reward, c.buffer_vs_time, c.n_envs_vs_time
    ));
    run.write(&format!("sweep-{env}.csv"), &rows)?;
    run.write(&format!("timing-sweep-{env}.csv"), &timing)
}

fn episodic(run: &mut Run) -> Result<()> {
    let sur = run.surrogate()?;
    let expert = Policy::load(run.require(EXPERT_FILE, "train-policy --env oracle")?)?;
    let mut baselines = vec![];
    for dk in DATASET_KINDS {
        for bk in BASELINE_KINDS {
            let name = baseline_name(bk, dk);
            baselines.push((name.clone(), run.baseline(&name)?));
        }
    }
    let mut models: Vec<(String, &dyn TransitionModel)> = vec![("pinn".into(), &sur)];
    models.extend(baselines.iter().map(|(n, m)| (n.clone(), m as &dyn TransitionModel)));
    let eps = comparison_episodes(&run.spec, &expert, run.cfg.episodic.len, run.cfg.ppo.seed)?;
    let rows = episodic_comparison(&run.spec, &models, &eps)?;
    write_episodic_csv(run.path("episodic-mae.csv"), &rows)?;
    run.wrote("episodic-mae.csv");
    let mut summary = String::from("model,policy,mean_mae\n");
    for r in &rows {
        summary.push_str(&format!("{},{},{}\n", r.model, r.policy, r.mean));
    }
    run.write("episodic-summary.csv", &summary)
}

fn bench(run: &mut Run) -> Result<()> {
    let sur = run.surrogate()?;
    let rep = bench_inference(run.spec.clone(), &sur, run.cfg.bench.n, run.cfg.ppo.seed)?;
    rep.write_csv(run.path("timing-bench.csv"))?;
    run.wrote("timing-bench.csv");
    rep.write_summary_csv(run.path("timing-bench-summary.csv"))?;
    run.wrote("timing-bench-summary.csv");
    eprintln!(
        "median oracle {:.3e} s, surrogate {:.3e} s, ratio {:.3}",
        rep.oracle_median_s, rep.surrogate_median_s, rep.speedup
    );
    Ok(())
}
