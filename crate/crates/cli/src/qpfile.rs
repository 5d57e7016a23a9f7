//! Plain-text dense QPs for `solve-qp`.
//!
//! ```text
//! 2
//! -1 0.5
//! 0.5 -1
//! 1 1
//! group 0 1
//! ```

use std::fmt::Write as _;

use rg_core::infer::DEFAULT_TOL;
use rg_core::{
    check_copositive_grid, dense_coordinate_descent, projected_gradient, score, Copositivity,
    DenseQp, Score, SquareMatrix,
};

use crate::{Failure, Method};

fn numbers(line: &str, ln: usize) -> Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| format!("line {ln}: bad number {t:?}"))
        })
        .collect()
}

pub fn parse(text: &str) -> Result<DenseQp, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (ln, first) = lines.next().ok_or("empty QP file")?;
    let n: usize = first
        .parse()
        .map_err(|_| format!("line {ln}: expected the dimension, found {first:?}"))?;
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let (ln, l) = lines.next().ok_or(format!("missing row {r} of W"))?;
        let row = numbers(l, ln)?;
        if row.len() != n {
            return Err(format!(
                "line {ln}: row {r} has {} entries, expected {n}",
                row.len()
            ));
        }
        rows.push(row);
    }
    let (ln, l) = lines.next().ok_or("missing b")?;
    let b = numbers(l, ln)?;
    let mut groups = Vec::new();
    for (ln, l) in lines {
        let Some(rest) = l.strip_prefix("group") else {
            return Err(format!("line {ln}: expected `group i j ...`"));
        };
        let g = rest
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("line {ln}: bad index {t:?}")))
            .collect::<Result<Vec<usize>, _>>()?;
        groups.push(g);
    }
    let w = SquareMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
    DenseQp::new(w, b, groups).map_err(|e| e.to_string())
}

fn fmt_vec(z: &[f64]) -> String {
    z.iter()
        .map(|v| format!("{v:.9}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn solve(
    qp: &DenseQp,
    method: Method,
    max_iters: usize,
    step: f64,
    resolution: usize,
) -> Result<String, Failure> {
    let mut out = String::new();
    let z = match method {
        Method::Cd => {
            let s = dense_coordinate_descent(qp, max_iters, DEFAULT_TOL)?;
            writeln!(
                out,
                "sweeps {} converged {} diverged {}",
                s.sweeps, s.converged, s.diverged
            )
            .unwrap();
            s.z
        }
        Method::Pg => {
            if !qp.groups().is_empty() {
                return Err(Failure::Usage(
                    "projected gradient ignores exclusivity groups; use --method cd".into(),
                ));
            }
            projected_gradient(qp, step, max_iters)?
        }
        Method::Copositive => {
            match check_copositive_grid(&qp.w().negated(), resolution)? {
                Copositivity::CopositiveOnGrid { min_value } => {
                    writeln!(out, "copositive-on-grid min {min_value:.6e}").unwrap();
                }
                Copositivity::Counterexample { z, value } => {
                    writeln!(out, "counterexample value {value:.6e}").unwrap();
                    writeln!(out, "z {}", fmt_vec(&z)).unwrap();
                }
            }
            return Ok(out);
        }
    };
    writeln!(out, "z {}", fmt_vec(&z)).unwrap();
    match score(qp, &z)? {
        Score::Finite(s) => writeln!(out, "score {s:.9}").unwrap(),
        Score::Infeasible => writeln!(out, "score infeasible").unwrap(),
    }
    Ok(out)
}
