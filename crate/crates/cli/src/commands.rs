use std::fmt::Write as _;
use std::path::Path;

use csalign_core::datagen::{format_embeddings, format_tokens, write_atomic};
use csalign_core::{
    cs_divergence, cs_divergence_rkhs, finite_difference_check, gen_paired, gen_token_clouds, gen_unpaired,
    read_embeddings, toy_example_report, DivergenceValue, Error, GradProblem, KernelParams, LossId, RandomSource,
    SyntheticConfig, TokenCloudConfig,
};

use crate::config::load_config;
use crate::{
    CliError, EstimateArgs, GenCommand, GradcheckArgs, RunArgs, SyntheticArgs, EXIT_GRADCHECK, EXIT_NON_OVERLAPPING,
    EXIT_TRAINING_ABORT,
};

/// Relative error below which `gradcheck` passes.
pub const GRADCHECK_TOL: f64 = 1e-4;

fn load(path: &Path) -> Result<csalign_core::EmbeddingMatrix, CliError> {
    read_embeddings(path).map_err(|e| CliError::usage(format!("cannot load {}: {e}", path.display())))
}

fn usage(err: Error) -> CliError {
    CliError::usage(err.to_string())
}

fn write_output(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn estimate(args: &EstimateArgs) -> Result<String, CliError> {
    let x = load(&args.x)?;
    let y = load(&args.y)?;
    let kernel = KernelParams::new(args.sigma).map_err(usage)?;
    let value = if args.rkhs {
        cs_divergence_rkhs(&x, &y, kernel)
    } else {
        cs_divergence(&x, &y, kernel)
    }
    .map_err(usage)?;
    match value {
        DivergenceValue::Finite(v) => Ok(format!("{v:.12}\n")),
        DivergenceValue::NonOverlapping => Err(CliError::with_stdout(
            EXIT_NON_OVERLAPPING,
            "sample sets do not overlap under the kernel".into(),
            "non-overlapping\n".into(),
        )),
    }
}

pub fn toy() -> String {
    let r = toy_example_report();
    format!(
        "mi(0.99) {:.4}\nmi(0) {:.4}\nkl(offset) {:.4}\nkl(matched) {:.4}\n\
         note: kl(offset) is KL(N(0,4) || N(2,1)) from the closed form; a quoted value of 6.81 does not follow from these parameters in either direction\n",
        r.mi_correlated, r.mi_independent, r.kl_offset, r.kl_matched
    )
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<String, CliError> {
    let loss: LossId = args.loss.parse().map_err(usage)?;
    let problem = GradProblem::random(loss, args.n, args.dim, args.seed).map_err(usage)?;
    let report = finite_difference_check(&problem, args.step).map_err(usage)?;
    let mut out = String::new();
    let _ = writeln!(out, "loss {loss}");
    let _ = writeln!(out, "step {:e}", report.step);
    let _ = writeln!(out, "max_rel_err {:e}", report.max_rel_err);
    match report.worst_coordinate {
        Some(c) => {
            let _ = writeln!(
                out,
                "worst_matrix {}\nworst_row {}\nworst_col {}",
                c.matrix, c.row, c.col
            );
        }
        None => out.push_str("worst_matrix none\n"),
    }
    if report.max_rel_err < GRADCHECK_TOL {
        out.push_str("status pass\n");
        Ok(out)
    } else {
        out.push_str("status fail\n");
        Err(CliError::with_stdout(
            EXIT_GRADCHECK,
            format!("max relative error {:e} exceeds {GRADCHECK_TOL:e}", report.max_rel_err),
            out,
        ))
    }
}

fn training_error(err: Error) -> CliError {
    match err {
        Error::TrainingAborted { .. } => CliError::with_stdout(EXIT_TRAINING_ABORT, err.to_string(), String::new()),
        other => usage(other),
    }
}

fn base_dir(config: &Path) -> &Path {
    config.parent().unwrap_or(Path::new("."))
}

pub fn train(args: &RunArgs) -> Result<String, CliError> {
    let plan = load_config(&args.config)?.plan(base_dir(&args.config))?;
    let outcome = csalign_core::train(&plan.train, &plan.data, &plan.extras).map_err(training_error)?;
    write_output(&args.out, &csalign_core::trainer::metrics_csv(&outcome.metrics))?;
    let last = outcome.metrics.last().expect("epochs >= 1");
    Ok(format!(
        "rows {}\nfinal_eval_cs_divergence {}\nfinal_recall_at_1 {}\n",
        outcome.metrics.len(),
        last.eval_cs_divergence,
        last.recall_at_1
    ))
}

pub fn sweep(args: &RunArgs, threads: usize) -> Result<String, CliError> {
    let plan = load_config(&args.config)?.plan(base_dir(&args.config))?;
    let rows =
        csalign_core::sweep(&plan.train, &plan.data, &plan.extras, &plan.sweep, threads).map_err(training_error)?;
    write_output(&args.out, &csalign_core::trainer::sweep_csv(&rows))?;
    Ok(format!("rows {}\n", rows.len()))
}

fn synthetic(a: &SyntheticArgs) -> SyntheticConfig {
    SyntheticConfig {
        n_pairs: a.n_pairs,
        latent_dim: a.latent_dim,
        embed_dim: a.embed_dim,
        gap: a.gap,
        noise_std: a.noise_std,
        seed: a.seed,
        shared_map: a.shared_map,
    }
}

fn range(v: &[usize]) -> (usize, usize) {
    (v[0], v[1])
}

pub fn gen(cmd: &GenCommand) -> Result<String, CliError> {
    match cmd {
        GenCommand::Paired(a) => {
            let d = gen_paired(&synthetic(&a.synthetic)).map_err(usage)?;
            write_output(&a.out_x, &format_embeddings(&d.x))?;
            write_output(&a.out_y, &format_embeddings(&d.y))?;
            Ok(format!("rows {}\ncols {}\n", d.len(), d.dim()))
        }
        GenCommand::Unpaired(a) => {
            let pool = gen_unpaired(&synthetic(&a.synthetic), a.m_x, a.m_y).map_err(usage)?;
            write_output(&a.out_x, &format_embeddings(&pool.extra_x))?;
            write_output(&a.out_y, &format_embeddings(&pool.extra_y))?;
            Ok(format!(
                "rows_x {}\nrows_y {}\n",
                pool.extra_x.rows(),
                pool.extra_y.rows()
            ))
        }
        GenCommand::Tokens(a) => {
            let cfg = TokenCloudConfig {
                n: a.n,
                v_range: range(&a.v_range),
                l_range: range(&a.l_range),
                dim: a.dim,
                gap: a.gap,
                noise: a.noise,
                center_std: a.center_std,
            };
            let (vision, text) = gen_token_clouds(&cfg, &mut RandomSource::new(a.seed)).map_err(usage)?;
            write_output(&a.out_vision, &format_tokens(&vision).map_err(usage)?)?;
            write_output(&a.out_text, &format_tokens(&text).map_err(usage)?)?;
            Ok(format!("samples {}\n", vision.len()))
        }
    }
}
