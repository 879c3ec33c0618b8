//! Plain-text posterior files.
//!
//! ```text
//! bbalpha-posterior 1
//! dim 3
//! log_noise -0.5          # or "log_noise none"
//! 0.12 -4.1               # one "mu log_var" pair per line
//! ...
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so a written file
//! parses back to identical values.

use std::fmt::Write as _;

use bbalpha::expfam::FactorizedGaussian;

pub const HEADER: &str = "bbalpha-posterior 1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPosterior {
    pub q: FactorizedGaussian<f64>,
    pub log_noise: Option<f64>,
}

impl StoredPosterior {
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\ndim {}\n", self.q.dim());
        match self.log_noise {
            Some(v) => writeln!(s, "log_noise {v:?}").unwrap(),
            None => s.push_str("log_noise none\n"),
        }
        for (m, lv) in self.q.mu().iter().zip(self.q.log_var()) {
            writeln!(s, "{m:?} {lv:?}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
        let (_, header) = next("header")?;
        if header.trim() != HEADER {
            return Err(format!("unsupported header {header:?}"));
        }
        let (_, dim_line) = next("dim line")?;
        let dim: usize = field(dim_line, "dim")?.parse().map_err(|_| format!("bad dim line {dim_line:?}"))?;
        let (_, noise_line) = next("log_noise line")?;
        let log_noise = match field(noise_line, "log_noise")? {
            "none" => None,
            v => Some(number(v, 3)?),
        };
        let mut mu = Vec::with_capacity(dim);
        let mut log_var = Vec::with_capacity(dim);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("line {}: expected \"mu log_var\"", i + 1));
            };
            mu.push(number(a, i + 1)?);
            log_var.push(number(b, i + 1)?);
        }
        if mu.len() != dim {
            return Err(format!("dim {dim} but {} parameter lines", mu.len()));
        }
        let q = FactorizedGaussian::new(mu, log_var).map_err(|e| e.to_string())?;
        Ok(Self { q, log_noise })
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str, String> {
    line.trim()
        .strip_prefix(key)
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| format!("expected \"{key} …\""))
}

fn number(s: &str, line: usize) -> Result<f64, String> {
    s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("line {line}: bad number {s:?}"))
}
