//! Command-line front end: dataset generation, training, evaluation, exact
//! assignment solving, horizon sweeps, trajectory probes, and self-checks.
//!
//! Every run resolves its settings the same way — built-in defaults, then
//! the `--config` file, then individual long-form flags — and writes the
//! complete resolved key set to `config.resolved` in its output directory,
//! so artifacts always carry the configuration that produced them. All
//! randomness comes from the two seeds in that configuration; nothing reads
//! environment variables or wall-clock entropy.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use odeassign::diag;
use odeassign::ilp::{solve_exact, AssignmentProblem};
use odeassign::odesolve::fmt_f64;
use odeassign::pipeline::{
    self, evaluate, load_checkpoint, model_init, save_checkpoint, sweep_tend, trajectory_probe,
    Setting, TrainState, SWEEP_GRID,
};
use odeassign::runcfg::RunConfig;
use odeassign::taskgen::{gen_dataset, load_dataset, write_dataset, Dataset};
use odeassign::{Error, Result};

/// Default probe times: the training horizon in half-unit steps plus one
/// unit beyond it.
const PROBE_TIMES: [f64; 6] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5];

macro_rules! override_flags {
    ($($name:ident),* $(,)?) => {
        /// Config resolution shared by every data-touching subcommand:
        /// defaults, then the config file, then these flags.
        #[derive(Args, Debug, Default)]
        struct Overrides {
            /// Key = value configuration file applied before any flags.
            #[arg(long, value_name = "FILE")]
            config: Option<PathBuf>,
            $(
                #[arg(
                    long,
                    value_name = "VALUE",
                    help = concat!("Override the ", stringify!($name), " config key")
                )]
                $name: Option<String>,
            )*
        }

        impl Overrides {
            fn resolve(&self) -> Result<RunConfig> {
                let mut rc = RunConfig::default();
                if let Some(path) = &self.config {
                    rc.merge_file(path)?;
                }
                $(
                    if let Some(value) = &self.$name {
                        rc.apply_kv(stringify!($name), value)?;
                    }
                )*
                rc.validate()?;
                Ok(rc)
            }
        }
    };
}

override_flags!(
    n_obj_labels,
    n_pred_labels,
    feat_dim,
    objects_min,
    objects_max,
    cluster_spread,
    coupling_strength,
    context_fraction,
    background_prior,
    task_seed,
    n_scenes,
    split,
    dataset,
    checkpoint,
    out,
    eval_split,
    threads,
    epochs,
    batch_size,
    lr,
    beta1,
    beta2,
    eps,
    grad_path,
    preproc,
    train_seed,
    obj_state,
    pair_state,
    embed_dim,
    pred_hidden,
    preproc_width,
    ode_hidden,
    atol,
    rtol,
    h_init,
    h_min,
    h_max,
    max_steps,
    safety,
    t_end,
);

#[derive(Parser)]
#[command(
    name = "odeassign",
    version,
    about = "Assignment learning with continuous-time state refinement: \
             generate synthetic scenes, train, evaluate, and diagnose."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with exact joint assignments planted.
    Gen(GenArgs),
    /// Train the two-branch model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Solve one assignment problem file exactly and print the solution.
    Ilp(IlpArgs),
    /// Re-evaluate a checkpoint across a grid of integration horizons.
    Sweep(SweepArgs),
    /// Read label trajectories out at intermediate integration times.
    Probe(ProbeArgs),
    /// Run the built-in numerical self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Overrides,
    /// predcls (annotated objects given) or sgcls (objects predicted too).
    #[arg(long, default_value = "sgcls")]
    setting: String,
}

#[derive(Args)]
struct IlpArgs {
    /// JSON file holding the assignment problem.
    #[arg(value_name = "PROBLEM")]
    problem: PathBuf,
    /// Also write the solution JSON here (stdout is always printed).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated horizons; defaults to the built-in eight-point grid.
    #[arg(long, value_name = "T1,T2,...")]
    grid: Option<String>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated readout times (strictly increasing).
    #[arg(long, value_name = "T1,T2,...")]
    times: Option<String>,
    /// How many scenes of the chosen split to probe.
    #[arg(long, default_value_t = 50, value_name = "N")]
    scenes: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Solver tolerance for the gradient-path agreement check.
    #[arg(long, default_value_t = 1e-8, value_name = "TOL")]
    tol: f64,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Ilp(a) => cmd_ilp(&a),
        Cmd::Sweep(a) => cmd_sweep(&a),
        Cmd::Probe(a) => cmd_probe(&a),
        Cmd::Check(a) => cmd_check(&a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_floats(flag: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| Error::parse("flag", format!("--{flag}: {e}")))
        })
        .collect()
}

fn load_dataset_for(rc: &RunConfig) -> Result<Dataset> {
    let (ds, manifest) = load_dataset(&rc.dataset)?;
    if manifest.config != rc.task {
        return Err(Error::config(format!(
            "dataset under {} was generated with different task keys; \
             regenerate it or adjust the task settings",
            rc.dataset.display()
        )));
    }
    Ok(ds)
}

fn require_checkpoint(rc: &RunConfig) -> Result<&Path> {
    rc.checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("this command needs checkpoint = <dir> (or --checkpoint)"))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let ds = gen_dataset(&rc.task, rc.n_scenes, rc.split)?;
    let manifest = write_dataset(&rc.dataset, &ds, &rc.task)?;
    rc.write_resolved(&rc.out)?;
    let [tr, va, te] = manifest.split_sizes;
    println!(
        "wrote {} scenes ({tr} train / {va} val / {te} test) under {}",
        manifest.n_scenes,
        rc.dataset.display()
    );
    println!("content hash {}", manifest.content_hash);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let ds = load_dataset_for(&rc)?;
    rc.write_resolved(&rc.out)?;

    let (mut state, resumed) = match &rc.checkpoint {
        Some(dir) => {
            let (state, stored) = load_checkpoint(dir)?;
            // Resuming may extend the epoch budget but must not silently
            // change anything that alters the arithmetic.
            let mut stored_rest = stored;
            stored_rest.epochs = rc.train.epochs;
            if stored_rest != rc.train {
                return Err(Error::config(
                    "checkpoint was trained under different settings; \
                     only the epochs key may change on resume",
                ));
            }
            println!("resuming from {} at epoch {}", dir.display(), state.epoch);
            (state, true)
        }
        None => (TrainState::new(model_init(&rc.task, &rc.train)?), false),
    };

    let log_path = rc.out.join("train_log.csv");
    let mut log: Box<dyn std::io::Write> = if resumed && log_path.exists() {
        Box::new(
            fs::OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?,
        )
    } else {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "epoch,train_loss,val_obj_acc,val_recall50,nfe_mean")
            .map_err(|e| Error::io(&log_path, e))?;
        Box::new(f)
    };

    let ckpt_dir = rc.out.join("checkpoints").join("last");
    let tc = rc.train.clone();
    pipeline::train_with(&mut state, &ds, &tc, |st, row| {
        writeln!(
            log,
            "{},{},{},{},{}",
            row.epoch,
            fmt_f64(row.train_loss),
            fmt_f64(row.val_obj_acc),
            fmt_f64(row.val_recall50),
            fmt_f64(row.nfe_mean)
        )
        .map_err(|e| Error::io(&log_path, e))?;
        save_checkpoint(&ckpt_dir, st, &tc)?;
        println!(
            "epoch {}: loss {:.6}  val_obj_acc {:.4}  val_recall50 {:.4}  nfe {:.1}",
            row.epoch, row.train_loss, row.val_obj_acc, row.val_recall50, row.nfe_mean
        );
        Ok(())
    })?;

    if state.epoch == 0 {
        // Zero-epoch runs still leave a usable checkpoint of the init.
        save_checkpoint(&ckpt_dir, &state, &tc)?;
    }
    println!(
        "trained to epoch {}; checkpoint at {}",
        state.epoch,
        ckpt_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let setting: Setting = args.setting.parse()?;
    let ds = load_dataset_for(&rc)?;
    let (state, _) = load_checkpoint(require_checkpoint(&rc)?)?;
    let scenes = rc.eval_split.of(&ds);
    let report = evaluate(&state.model, scenes, setting, &rc.train.solver)?;
    rc.write_resolved(&rc.out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::parse("report", e.to_string()))?;
    let path = rc.out.join(format!("report_{setting}.json"));
    write_text(&path, &(json + "\n"))?;
    println!(
        "{setting} on {} {} scenes: obj_acc {:.4}  oracle_agreement {:.4}  \
         greedy_agreement {:.4}  recall@20/50/100 {:.4}/{:.4}/{:.4}",
        report.n_scenes,
        rc.eval_split,
        report.obj_accuracy,
        report.oracle_agreement,
        report.greedy_agreement,
        report.recall[&20],
        report.recall[&50],
        report.recall[&100]
    );
    println!("report at {}", path.display());
    Ok(())
}

fn cmd_ilp(args: &IlpArgs) -> Result<()> {
    let text = fs::read_to_string(&args.problem).map_err(|e| Error::io(&args.problem, e))?;
    let problem: AssignmentProblem = serde_json::from_str(&text)
        .map_err(|e| Error::parse("problem file", e.to_string()))?;
    let solution = solve_exact(&problem)?;
    let json = serde_json::to_string_pretty(&solution)
        .map_err(|e| Error::parse("solution", e.to_string()))?;
    println!("{json}");
    if let Some(path) = &args.out {
        write_text(path, &(json + "\n"))?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let ds = load_dataset_for(&rc)?;
    let (state, _) = load_checkpoint(require_checkpoint(&rc)?)?;
    let grid = match &args.grid {
        Some(g) => parse_floats("grid", g)?,
        None => SWEEP_GRID.to_vec(),
    };
    let scenes = rc.eval_split.of(&ds);
    let rows = sweep_tend(&state.model, scenes, &grid, &rc.train.solver)?;
    rc.write_resolved(&rc.out)?;
    let mut csv = String::from("t_end,obj_accuracy,oracle_agreement,recall50,nfe_mean,time_mean\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(r.t_end),
            fmt_f64(r.obj_accuracy),
            fmt_f64(r.oracle_agreement),
            fmt_f64(r.recall50),
            fmt_f64(r.nfe_mean),
            fmt_f64(r.time_mean)
        ));
    }
    let path = rc.out.join("sweep.csv");
    write_text(&path, &csv)?;
    println!(
        "swept {} horizons over {} {} scenes; rows at {}",
        rows.len(),
        scenes.len(),
        rc.eval_split,
        path.display()
    );
    Ok(())
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let rc = args.common.resolve()?;
    let ds = load_dataset_for(&rc)?;
    let (state, _) = load_checkpoint(require_checkpoint(&rc)?)?;
    let times = match &args.times {
        Some(t) => parse_floats("times", t)?,
        None => PROBE_TIMES.to_vec(),
    };
    let scenes = rc.eval_split.of(&ds);
    if args.scenes == 0 {
        return Err(Error::config("--scenes must be at least 1"));
    }
    let take = args.scenes.min(scenes.len());
    if take == 0 {
        return Err(Error::config(format!(
            "the {} split has no scenes to probe",
            rc.eval_split
        )));
    }

    let join = |labels: &[usize]| {
        labels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";")
    };
    let mut csv = String::from("scene,time,objects_correct,n_objects,obj_labels,pred_labels\n");
    for scene in &scenes[..take] {
        let rows = trajectory_probe(&state.model, scene, &times, &rc.train.solver)?;
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                scene.index,
                fmt_f64(row.time),
                row.objects_correct,
                scene.n_objects(),
                join(&row.obj_labels),
                join(&row.pred_labels)
            ));
        }
    }
    rc.write_resolved(&rc.out)?;
    let path = rc.out.join("probe.csv");
    write_text(&path, &csv)?;
    println!(
        "probed {take} {} scenes at {} times; rows at {}",
        rc.eval_split,
        times.len(),
        path.display()
    );
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<()> {
    let tol = args.tol;
    let mut failures = 0usize;
    let mut record = |name: &str, outcome: Result<String>| match outcome {
        Ok(detail) => println!("check {name:<14} ok    {detail}"),
        Err(e) => {
            failures += 1;
            println!("check {name:<14} FAIL  {e}");
        }
    };

    record(
        "tableau",
        diag::check_tableau().map(|_| "stage and order constants consistent".to_owned()),
    );
    record(
        "solver_order",
        diag::check_solver_order().map(|f| format!("error halving factor {f:.1}")),
    );
    record(
        "exp_accuracy",
        diag::check_exponential_accuracy().map(|e| format!("|x(1) - e| = {e:.2e}")),
    );
    record(
        "autodiff",
        diag::check_autodiff(50).map(|m| format!("max rel err {m:.2e} over 50 probes")),
    );
    record(
        "grad_paths",
        diag::check_gradient_agreement(20, tol).map(|r| {
            let worst = r
                .adjoint_vs_discretize
                .max_rel
                .max(r.adjoint_vs_fd.max_rel)
                .max(r.discretize_vs_fd.max_rel);
            format!(
                "max rel err {worst:.2e} within bound {:.2e} at tol {tol:.0e}",
                diag::agreement_bound(tol)
            )
        }),
    );
    record(
        "ilp_oracle",
        diag::check_ilp_equivalence(200, 7)
            .map(|_| "200 random instances equal plain enumeration".to_owned()),
    );

    if failures > 0 {
        Err(Error::config(format!("{failures} check(s) failed")))
    } else {
        println!("all checks passed");
        Ok(())
    }
}
