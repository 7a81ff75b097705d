//! Plain-text form of mixtures and posteriors.
//!
//! One header line followed by one line per component. Vectors and matrices
//! are comma-separated, matrices row-major. Floats are written in shortest
//! round-trip form, so write -> parse -> write is the identity.
//!
//! ```text
//! gmm dim=1 k=2
//! w=0.7 mean=0 info=1
//! w=0.3 mean=10 info=0.25
//! ```
//!
//! ```text
//! posterior dim=1 k=1
//! w=1 m=0.01 lambda=1000 nu=1002 v=1010
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::vbi::{VariationalComponent, VariationalPosterior};
use super::{GaussianComponent, GaussianMixture};
use crate::error::{Error, Result};

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    s
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn write_mixture(gmm: &GaussianMixture) -> String {
    let mut out = format!("gmm dim={} k={}\n", gmm.dim(), gmm.len());
    for c in gmm.components() {
        writeln!(out, "w={} mean={} info={}", c.weight, join(c.mean.as_slice()), join(&row_major(c.info()))).unwrap();
    }
    out
}

pub fn write_posterior(post: &VariationalPosterior) -> String {
    let mut out = format!("posterior dim={} k={}\n", post.dim(), post.len());
    for c in post.components() {
        writeln!(
            out,
            "w={} m={} lambda={} nu={} v={}",
            c.weight,
            join(c.m.as_slice()),
            join(&row_major(&c.lambda)),
            c.nu,
            join(&row_major(&c.v))
        )
        .unwrap();
    }
    out
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { iter: text.lines().enumerate() }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.iter.by_ref() {
            let line = line.trim();
            if !line.is_empty() && !line.starts_with('#') {
                return Some((i + 1, line));
            }
        }
        None
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn fields<'a>(line_no: usize, line: &'a str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != keys.len() {
        return Err(parse_err(line_no, format!("expected {} fields, found {}", keys.len(), parts.len())));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(p, k)| {
            p.strip_prefix(k)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| parse_err(line_no, format!("expected `{k}=`, found `{p}`")))
        })
        .collect()
}

fn numbers(line_no: usize, s: &str, expected: usize) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|x| x.parse::<f64>().map_err(|e| parse_err(line_no, format!("bad number `{x}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != expected {
        return Err(parse_err(line_no, format!("expected {expected} values, found {}", v.len())));
    }
    Ok(v)
}

fn header(lines: &mut Lines, tag: &str) -> Result<(usize, usize)> {
    let (n, line) = lines.next().ok_or_else(|| parse_err(1, format!("missing `{tag}` header")))?;
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| parse_err(n, format!("expected `{tag}` header")))?;
    let f = fields(n, rest, &["dim", "k"])?;
    let parse = |s: &str| s.parse::<usize>().map_err(|e| parse_err(n, e.to_string()));
    Ok((parse(f[0])?, parse(f[1])?))
}

pub fn parse_mixture(text: &str) -> Result<GaussianMixture> {
    let mut lines = Lines::new(text);
    let (d, k) = header(&mut lines, "gmm")?;
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, line) = lines.next().ok_or_else(|| parse_err(0, "missing component line"))?;
        let f = fields(n, line, &["w", "mean", "info"])?;
        let w = numbers(n, f[0], 1)?[0];
        let mean = DVector::from_vec(numbers(n, f[1], d)?);
        let info = DMatrix::from_row_slice(d, d, &numbers(n, f[2], d * d)?);
        components.push(GaussianComponent::from_info(w, mean, info).map_err(|e| parse_err(n, e.to_string()))?);
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(n, "trailing content after the last component"));
    }
    GaussianMixture::new(components)
}

pub fn parse_posterior(text: &str) -> Result<VariationalPosterior> {
    let mut lines = Lines::new(text);
    let (d, k) = header(&mut lines, "posterior")?;
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let (n, line) = lines.next().ok_or_else(|| parse_err(0, "missing component line"))?;
        let f = fields(n, line, &["w", "m", "lambda", "nu", "v"])?;
        components.push(VariationalComponent {
            weight: numbers(n, f[0], 1)?[0],
            m: DVector::from_vec(numbers(n, f[1], d)?),
            lambda: DMatrix::from_row_slice(d, d, &numbers(n, f[2], d * d)?),
            nu: numbers(n, f[3], 1)?[0],
            v: DMatrix::from_row_slice(d, d, &numbers(n, f[4], d * d)?),
        });
    }
    if let Some((n, _)) = lines.next() {
        return Err(parse_err(n, "trailing content after the last component"));
    }
    VariationalPosterior::new(d, components)
}
