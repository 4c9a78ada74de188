//! One- and two-photon interference through a linear-optical unitary.
//!
//! Throughout, `U[(i, m)]` is the amplitude for a photon entering port `i`
//! to leave port `m`. Ports are 0-based here; file formats and the CLI use
//! 1-based labels.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{permanent, UnitaryMatrix};

/// Largest photon number handled by [`n_photon_prob_oracle`].
pub const ORACLE_MAX_PHOTONS: usize = 4;

/// Below this classical coincidence probability the visibility is undefined.
pub const VISIBILITY_DENOM_MIN: f64 = 1e-15;

/// Occupation numbers, one per mode.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FockState {
    occupations: Vec<usize>,
}

impl FockState {
    pub fn new(occupations: Vec<usize>) -> Result<Self> {
        if occupations.iter().sum::<usize>() == 0 {
            return Err(Error::UnsupportedInput("Fock state must hold at least one photon".into()));
        }
        Ok(Self { occupations })
    }

    /// One photon in each of the listed modes (repeats allowed).
    pub fn from_photons(modes: usize, photons: &[usize]) -> Result<Self> {
        let mut occ = vec![0; modes];
        for &p in photons {
            if p >= modes {
                return Err(Error::IndexOutOfRange { index: p, dim: modes });
            }
            occ[p] += 1;
        }
        Self::new(occ)
    }

    pub fn occupations(&self) -> &[usize] {
        &self.occupations
    }

    pub fn modes(&self) -> usize {
        self.occupations.len()
    }

    pub fn total(&self) -> usize {
        self.occupations.iter().sum()
    }

    /// Mode index of every photon, in ascending order.
    pub fn photon_modes(&self) -> Vec<usize> {
        self.occupations.iter().enumerate().flat_map(|(mode, &n)| std::iter::repeat_n(mode, n)).collect()
    }

    /// Every Fock state of `total` photons in `modes` modes, in lexicographic
    /// order of the occupation vector, highest first (`200, 110, 101, 020, ...`).
    pub fn enumerate(modes: usize, total: usize) -> Vec<FockState> {
        fn rec(modes: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<FockState>) {
            if prefix.len() + 1 == modes {
                prefix.push(left);
                out.push(FockState { occupations: prefix.clone() });
                prefix.pop();
                return;
            }
            for n in (0..=left).rev() {
                prefix.push(n);
                rec(modes, left - n, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        if modes > 0 && total > 0 {
            rec(modes, total, &mut Vec::new(), &mut out);
        }
        out
    }

    fn factorial_product(&self) -> f64 {
        self.occupations.iter().map(|&n| (1..=n).product::<usize>() as f64).product()
    }
}

impl fmt::Display for FockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.occupations {
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

/// Parses the ket label notation `"110"`: one decimal digit per mode.
impl FromStr for FockState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let occ = s
            .trim()
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::UnsupportedInput(format!("bad Fock label {s:?}")))?;
        Self::new(occ)
    }
}

/// Gaussian temporal overlap between the two photons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelayProfile {
    /// Overlap constant, ps^-2.
    pub kappa: f64,
    /// Relative arrival delay, ps.
    pub tau: f64,
}

impl DelayProfile {
    pub fn new(kappa: f64, tau: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) || !tau.is_finite() {
            return Err(Error::Domain(format!("need kappa > 0 and finite tau, got {kappa}, {tau}")));
        }
        Ok(Self { kappa, tau })
    }

    /// Indistinguishability factor `exp(-kappa tau^2 / 2)`.
    pub fn overlap(&self) -> f64 {
        (-0.5 * self.kappa * self.tau * self.tau).exp()
    }
}

fn check_port(u: &UnitaryMatrix, p: usize) -> Result<()> {
    if p >= u.dim() {
        return Err(Error::IndexOutOfRange { index: p, dim: u.dim() });
    }
    Ok(())
}

fn check_pair(u: &UnitaryMatrix, (a, b): (usize, usize)) -> Result<()> {
    check_port(u, a)?;
    check_port(u, b)
}

fn distinct_inputs(input: (usize, usize)) -> Result<()> {
    if input.0 == input.1 {
        return Err(Error::UnsupportedInput(format!(
            "two-photon formulas need distinct input ports, got ({0}, {0})",
            input.0 + 1
        )));
    }
    Ok(())
}

/// `|U[input, j]|^2` for every output `j`.
pub fn single_photon_probs(u: &UnitaryMatrix, input: usize) -> Result<Vec<f64>> {
    check_port(u, input)?;
    Ok((0..u.dim()).map(|j| u[(input, j)].norm_sqr()).collect())
}

/// The two exchange amplitudes `U_im U_jn` and `U_in U_jm`.
fn path_amplitudes(u: &UnitaryMatrix, (i, j): (usize, usize), (m, n): (usize, usize)) -> (Complex64, Complex64) {
    (u[(i, m)] * u[(j, n)], u[(i, n)] * u[(j, m)])
}

/// Probability of one photon in each of `out` (or both in `out.0` when the
/// two coincide) for indistinguishable photons entering distinct ports `input`.
pub fn two_photon_prob(u: &UnitaryMatrix, input: (usize, usize), out: (usize, usize)) -> Result<f64> {
    check_pair(u, input)?;
    check_pair(u, out)?;
    distinct_inputs(input)?;
    let (a, b) = path_amplitudes(u, input, out);
    let bunching = if out.0 == out.1 { 2.0 } else { 1.0 };
    Ok((a + b).norm_sqr() / bunching)
}

/// Distinguishable-photon (classical) probability: the two paths add in intensity.
pub fn classical_two_photon_prob(u: &UnitaryMatrix, input: (usize, usize), out: (usize, usize)) -> Result<f64> {
    check_pair(u, input)?;
    check_pair(u, out)?;
    distinct_inputs(input)?;
    let (a, b) = path_amplitudes(u, input, out);
    if out.0 == out.1 {
        Ok(a.norm_sqr())
    } else {
        Ok(a.norm_sqr() + b.norm_sqr())
    }
}

/// Interference term `2 Re(U_im U_jn U*_jm U*_in)`.
fn interference_term(u: &UnitaryMatrix, input: (usize, usize), out: (usize, usize)) -> f64 {
    let (a, b) = path_amplitudes(u, input, out);
    2.0 * (a * b.conj()).re
}

fn distinct_outputs(out: (usize, usize)) -> Result<()> {
    if out.0 == out.1 {
        return Err(Error::UnsupportedInput(format!(
            "delay-dependent coincidences need distinct output ports, got ({0}, {0})",
            out.0 + 1
        )));
    }
    Ok(())
}

/// Coincidence probability at relative delay `d.tau`.
pub fn coincidence_vs_delay(
    u: &UnitaryMatrix,
    input: (usize, usize),
    out: (usize, usize),
    d: &DelayProfile,
) -> Result<f64> {
    check_pair(u, input)?;
    check_pair(u, out)?;
    distinct_inputs(input)?;
    distinct_outputs(out)?;
    let (a, b) = path_amplitudes(u, input, out);
    Ok(a.norm_sqr() + b.norm_sqr() + interference_term(u, input, out) * d.overlap())
}

/// Two-photon visibility; positive for a coincidence dip, negative for a peak.
pub fn predicted_visibility(u: &UnitaryMatrix, input: (usize, usize), out: (usize, usize)) -> Result<f64> {
    check_pair(u, input)?;
    check_pair(u, out)?;
    distinct_inputs(input)?;
    distinct_outputs(out)?;
    let (a, b) = path_amplitudes(u, input, out);
    let denominator = a.norm_sqr() + b.norm_sqr();
    if denominator < VISIBILITY_DENOM_MIN {
        return Err(Error::UndefinedVisibility { denominator });
    }
    Ok(-interference_term(u, input, out) / denominator)
}

/// General bosonic transition probability
/// `|Per(U[in, out])|^2 / (prod in_k! prod out_k!)`, with rows and columns of
/// the submatrix repeated by occupation.
pub fn n_photon_prob_oracle(u: &UnitaryMatrix, input: &FockState, output: &FockState) -> Result<f64> {
    let (n_in, n_out) = (input.total(), output.total());
    if n_in != n_out {
        return Err(Error::PhotonNumberMismatch { input: n_in, output: n_out });
    }
    if n_in > ORACLE_MAX_PHOTONS {
        return Err(Error::UnsupportedSize { dim: n_in, max: ORACLE_MAX_PHOTONS });
    }
    for s in [input, output] {
        if s.modes() != u.dim() {
            return Err(Error::UnsupportedInput(format!(
                "Fock state {s} has {} modes, device has {}",
                s.modes(),
                u.dim()
            )));
        }
    }
    let sub = u.matrix().select(&input.photon_modes(), &output.photon_modes())?;
    Ok(permanent(&sub)?.norm_sqr() / (input.factorial_product() * output.factorial_product()))
}
