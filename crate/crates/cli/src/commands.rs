//! Subcommand bodies. Each writes one CSV table preceded by the effective
//! configuration as `#` comment lines.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use gmwb::engine::{control_map, fair_fee, solve, step_at_time, ControlStorage, Solution};
use gmwb::grid::{build_grid, Grid};
use gmwb::kernel::select_weights;
use gmwb::mc::{replay, RNG_NAME};
use gmwb::model::{comparable_rate, Contract};
use gmwb::GmwbError;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Effective settings of one invocation.
pub struct Invocation {
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
}

impl Invocation {
    fn level(&self) -> usize {
        self.cfg.grid.level
    }

    fn contract(&self) -> Contract {
        self.cfg.contract.contract()
    }

    fn grid(&self, level: usize) -> Result<Grid, CliError> {
        let contract = self.contract();
        Ok(build_grid(
            &self.cfg.grid.grid_config(level, &contract)?,
            &contract,
        )?)
    }

    fn solve(&self, level: usize, controls: ControlStorage) -> Result<Solution, CliError> {
        let grid = self.grid(level)?;
        Ok(solve(
            &grid,
            &self.cfg.model,
            &self.contract(),
            &self.cfg.run.solver(controls),
        )?)
    }

    fn table(&self, command: &str) -> Result<csv::Writer<Box<dyn Write>>, CliError> {
        let mut sink: Box<dyn Write> = match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(io::stdout().lock()),
        };
        writeln!(sink, "# gmwb {command}")?;
        for line in self.cfg.to_toml().lines() {
            writeln!(sink, "# {line}")?;
        }
        Ok(csv::Writer::from_writer(sink))
    }
}

#[derive(Serialize)]
struct PriceRow {
    level: usize,
    price: f64,
    ratio: Option<f64>,
    alpha_eps: usize,
    defect: f64,
    seconds: f64,
}

fn price_rows(inv: &Invocation, levels: &[usize]) -> Result<Vec<PriceRow>, CliError> {
    let mut rows: Vec<PriceRow> = Vec::with_capacity(levels.len());
    for &level in levels {
        let start = Instant::now();
        let sol = inv.solve(level, ControlStorage::None)?;
        let price = sol.price()?;
        let n = rows.len();
        let ratio = (n >= 2).then(|| (rows[n - 1].price - rows[n - 2].price) / (price - rows[n - 1].price));
        rows.push(PriceRow {
            level,
            price,
            ratio,
            alpha_eps: sol.kernel.alpha,
            defect: sol.kernel.monotonicity_defect,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

fn write_rows<T: Serialize>(mut w: csv::Writer<Box<dyn Write>>, rows: &[T]) -> Result<(), CliError> {
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn price(inv: &Invocation) -> Result<(), CliError> {
    let rows = price_rows(inv, &[inv.level()])?;
    write_rows(inv.table("price")?, &rows)
}

pub fn converge(inv: &Invocation, levels: &[usize]) -> Result<(), CliError> {
    for &l in levels {
        inv.cfg.validate(l)?;
    }
    let rows = price_rows(inv, levels)?;
    write_rows(inv.table("converge")?, &rows)
}

#[derive(Serialize)]
struct FeeRow<'a> {
    model_tag: &'a str,
    maturity: f64,
    beta_f: f64,
    iterations: usize,
    price: f64,
}

pub fn fee(inv: &Invocation) -> Result<(), CliError> {
    let grid = inv.grid(inv.level())?;
    let res = fair_fee(
        &grid,
        &inv.cfg.model,
        &inv.contract(),
        &inv.cfg.run.solver(ControlStorage::None),
        &inv.cfg.run.fee,
    )?;
    let row = FeeRow {
        model_tag: &inv.cfg.run.model_tag,
        maturity: inv.contract().maturity,
        beta_f: res.fee,
        iterations: res.iterations,
        price: res.price,
    };
    write_rows(inv.table("fee")?, &[row])
}

#[derive(Serialize)]
struct ControlRow {
    z: f64,
    a: f64,
    gamma_star: f64,
    branch: &'static str,
}

pub fn controls(inv: &Invocation) -> Result<(), CliError> {
    let grid = inv.grid(inv.level())?;
    let t = inv.cfg.run.control_time;
    let m = step_at_time(&grid, t)?;
    let r_spot = match inv.cfg.run.control_rate {
        Some(r) => r,
        None => comparable_rate(&inv.cfg.model, inv.contract().maturity)?,
    };
    let sol = inv.solve(inv.level(), ControlStorage::Steps(vec![m]))?;
    let rows: Vec<ControlRow> = control_map(&sol, t, r_spot)?
        .into_iter()
        .map(|p| ControlRow {
            z: p.z,
            a: p.a,
            gamma_star: p.gamma,
            branch: p.branch.as_str(),
        })
        .collect();
    write_rows(inv.table("controls")?, &rows)
}

#[derive(Serialize)]
struct McRow {
    level: usize,
    pde_price: f64,
    mc_mean: f64,
    std_error: f64,
    ci_low: f64,
    ci_high: f64,
    paths: usize,
    substeps: usize,
    seed: u64,
    rng: &'static str,
    inside: bool,
}

pub fn mc_validate(inv: &Invocation) -> Result<(), CliError> {
    // Fail before the solve when the replay would lack a step.
    let steps = inv.grid(inv.level())?.n_tau;
    let missing = match &inv.cfg.run.store_controls {
        ControlStorage::All => None,
        ControlStorage::None => Some(0),
        ControlStorage::Steps(s) => (0..steps).find(|m| !s.contains(m)),
    };
    if let Some(m) = missing {
        return Err(GmwbError::ControlsNotStored(m).into());
    }
    let sol = inv.solve(inv.level(), inv.cfg.run.store_controls.clone())?;
    let mc = &inv.cfg.mc;
    let res = replay(&sol, mc)?;
    let pde = sol.price()?;
    eprintln!(
        "mean {:.4}  SE {:.4}  95% CI [{:.4}, {:.4}]  PDE {:.4}",
        res.mean, res.std_error, res.ci_low, res.ci_high, pde
    );
    let row = McRow {
        level: inv.level(),
        pde_price: pde,
        mc_mean: res.mean,
        std_error: res.std_error,
        ci_low: res.ci_low,
        ci_high: res.ci_high,
        paths: mc.n_paths,
        substeps: mc.substeps,
        seed: mc.seed,
        rng: RNG_NAME,
        inside: res.contains(pde),
    };
    write_rows(inv.table("mc-validate")?, &[row])
}

#[derive(Serialize)]
struct KernelRow {
    level: usize,
    alpha_eps: usize,
    defect: f64,
    accuracy_residual: f64,
    weight_sum_error: f64,
}

pub fn kernel_diag(inv: &Invocation, levels: &[usize]) -> Result<(), CliError> {
    let tolerances = inv.cfg.run.solver(ControlStorage::None).tolerances;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        inv.cfg.validate(level)?;
        let grid = inv.grid(level)?;
        let start = Instant::now();
        let k = select_weights(&grid, &inv.cfg.model, &tolerances)?;
        eprintln!(
            "level {level}: kernel selected in {:.2}s",
            start.elapsed().as_secs_f64()
        );
        rows.push(KernelRow {
            level,
            alpha_eps: k.alpha,
            defect: k.monotonicity_defect,
            accuracy_residual: k.accuracy_residual,
            weight_sum_error: k.weight_sum_error,
        });
    }
    write_rows(inv.table("kernel-diag")?, &rows)
}
