//! The experiment catalog printed by `aphomlab list`.

use crate::config::Kind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CatalogEntry {
    pub kind: Kind,
    /// The theorem whose statement the study exercises.
    pub theorem: &'static str,
    pub summary: &'static str,
}

pub fn entry(kind: Kind) -> CatalogEntry {
    let (theorem, summary) = match kind {
        Kind::Corrector => ("Theorem 1.3", "approximate correctors chi_S: sup norm, energy identity, quadrature oracles"),
        Kind::Effective => ("Theorem 1.3", "effective tensor A_S: ellipticity and Cauchy behaviour in S"),
        Kind::Flux => ("Theorem 1.3", "flux correctors: decomposition residual and skew symmetry"),
        Kind::Smoothing => ("Theorem 1.3", "smoothing operator S_eps and cutoff K_eps: contraction, gradient order, collar"),
        Kind::Rate => ("Theorem 1.3", "convergence rate of u_eps to u_0 against the modulus eta"),
        Kind::Modulus => ("Theorem 1.3", "modulus eta(t), almost-periodicity Theta(S) and the Dini condition"),
        Kind::LipschitzInterior => ("Theorem 1.5", "large-scale interior Lipschitz profile"),
        Kind::LipschitzBoundary => ("Theorem 1.6", "large-scale boundary Lipschitz profile with Psi"),
        Kind::Fundamental => ("Theorem 1.2", "fundamental solution Gaussian envelope and mass"),
        Kind::Holder => ("Theorem 1.1", "uniform interior Hoelder seminorm"),
    };
    CatalogEntry { kind, theorem, summary }
}

pub fn catalog() -> Vec<CatalogEntry> {
    Kind::ALL.iter().map(|&k| entry(k)).collect()
}

/// One line per kind: `kind → theorem: summary`.
pub fn catalog_text() -> String {
    let mut out = String::new();
    for e in catalog() {
        out.push_str(&format!("{} → {}: {}\n", e.kind.name(), e.theorem, e.summary));
    }
    out
}
