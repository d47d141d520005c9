//! Physical constants of the NV⁻ ground state and the strict override file.
//!
//! Units: MHz for energies, MHz/mT for gyromagnetic ratios.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Zero-field splitting (MHz).
    pub d_g: f64,
    /// Electron gyromagnetic ratio (MHz/mT).
    pub gamma_e: f64,
    /// 14N quadrupole parameter (MHz).
    pub q: f64,
    /// 14N gyromagnetic ratio (MHz/mT).
    pub gamma_n14: f64,
    /// 13C gyromagnetic ratio (MHz/mT).
    pub gamma_c13: f64,
    /// Axial 14N hyperfine parameter (MHz).
    pub a_par: f64,
    /// Transverse 14N hyperfine parameter (MHz).
    pub a_perp: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            d_g: 2870.0,
            gamma_e: 28.025,
            q: -4.96,
            gamma_n14: 0.003077,
            gamma_c13: 0.010704,
            a_par: -2.14,
            a_perp: -2.70,
        }
    }
}

const KEYS: [&str; 7] = [
    "d_g",
    "gamma_e",
    "q",
    "gamma_n14",
    "gamma_c13",
    "a_par",
    "a_perp",
];

impl PhysicalConstants {
    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "d_g" => &mut self.d_g,
            "gamma_e" => &mut self.gamma_e,
            "q" => &mut self.q,
            "gamma_n14" => &mut self.gamma_n14,
            "gamma_c13" => &mut self.gamma_c13,
            "a_par" => &mut self.a_par,
            "a_perp" => &mut self.a_perp,
            _ => return None,
        })
    }

    fn values(&self) -> [f64; 7] {
        [
            self.d_g,
            self.gamma_e,
            self.q,
            self.gamma_n14,
            self.gamma_c13,
            self.a_par,
            self.a_perp,
        ]
    }

    /// Applies `key = value` overrides on top of `self`.
    ///
    /// Blank lines and `#` comments are skipped. Unknown or repeated keys,
    /// missing `=`, and non-finite numbers are errors.
    pub fn with_overrides(mut self, text: &str, origin: &Path) -> Result<Self> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, n + 1, "expected 'key = value'"))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, n + 1, format!("bad number for '{key}'")))?;
            if !value.is_finite() {
                return Err(Error::parse(origin, n + 1, format!("non-finite value for '{key}'")));
            }
            if seen.contains(&key.to_string()) {
                return Err(Error::parse(origin, n + 1, format!("duplicate key '{key}'")));
            }
            let slot = self.slot(key).ok_or_else(|| {
                Error::parse(
                    origin,
                    n + 1,
                    format!("unknown key '{key}' (expected one of {})", KEYS.join(", ")),
                )
            })?;
            *slot = value;
            seen.push(key.to_string());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::default().with_overrides(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_e <= 0.0 {
            return Err(Error::invalid("gamma_e must be positive"));
        }
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("constants must be finite"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical `key = value` dump.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for PhysicalConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in KEYS.iter().zip(self.values()) {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.conf")
    }

    #[test]
    fn defaults() {
        let c = PhysicalConstants::default();
        assert_eq!(c.d_g, 2870.0);
        assert_eq!(c.gamma_e, 28.025);
        assert_eq!(c.q, -4.96);
        assert_eq!(c.gamma_n14, 0.003077);
        assert_eq!(c.gamma_c13, 0.010704);
        assert_eq!(c.a_par, -2.14);
        assert_eq!(c.a_perp, -2.70);
    }

    #[test]
    fn overrides_apply() {
        let c = PhysicalConstants::default()
            .with_overrides("# comment\n d_g = 2880\n\nq=-5.0 # inline\n", p())
            .unwrap();
        assert_eq!(c.d_g, 2880.0);
        assert_eq!(c.q, -5.0);
        assert_eq!(c.gamma_e, 28.025);
    }

    #[test]
    fn strict_parsing() {
        let base = PhysicalConstants::default();
        for bad in ["d_G = 1", "d_g 2870", "d_g = abc", "d_g = 1\nd_g = 2", "gamma_e = 0", "q = inf"] {
            assert!(base.with_overrides(bad, p()).is_err(), "{bad}");
        }
        match base.with_overrides("d_g = 1\nbogus = 2", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn display_round_trips() {
        let c = PhysicalConstants {
            a_perp: -2.75,
            ..Default::default()
        };
        let back = PhysicalConstants::default()
            .with_overrides(&c.to_string(), p())
            .unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_ne!(c.fingerprint(), PhysicalConstants::default().fingerprint());
    }
}
