//! Variable context: exactly two independent variables plus named parameters.

use std::fmt;
use std::sync::Arc;

/// The two independent variables and the ordered list of parameter names.
///
/// Every polynomial, rational function and operator carries an
/// `Arc<VarSpec>`; mixing values from different contexts is a logic error
/// and panics.  Slot 0 and 1 of every exponent vector are the independent
/// variables, slots 2.. are the parameters in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarSpec {
    pub first: String,
    pub second: String,
    pub params: Vec<String>,
}

pub type Vars = Arc<VarSpec>;

impl VarSpec {
    pub fn new(first: &str, second: &str, params: &[&str]) -> Vars {
        let spec = VarSpec {
            first: first.to_string(),
            second: second.to_string(),
            params: params.iter().map(|s| s.to_string()).collect(),
        };
        spec.validate().expect("invalid VarSpec");
        Arc::new(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut names: Vec<&str> = vec![&self.first, &self.second];
        names.extend(self.params.iter().map(|s| s.as_str()));
        for n in &names {
            if n.is_empty() {
                return Err("empty variable name".into());
            }
        }
        for (i, a) in names.iter().enumerate() {
            for b in names.iter().skip(i + 1) {
                if a == b {
                    return Err(format!("duplicate name `{a}`"));
                }
            }
        }
        Ok(())
    }

    /// Total number of symbol slots (2 + number of parameters).
    pub fn arity(&self) -> usize {
        2 + self.params.len()
    }

    /// Slot index of a name, if declared.
    pub fn slot(&self, name: &str) -> Option<usize> {
        if name == self.first {
            return Some(0);
        }
        if name == self.second {
            return Some(1);
        }
        self.params.iter().position(|p| p == name).map(|i| i + 2)
    }

    pub fn name(&self, slot: usize) -> &str {
        match slot {
            0 => &self.first,
            1 => &self.second,
            i => &self.params[i - 2],
        }
    }

    /// True for slot 0 or 1.
    pub fn is_independent(&self, slot: usize) -> bool {
        slot < 2
    }
}

impl fmt::Display for VarSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vars {}, {}", self.first, self.second)?;
        if !self.params.is_empty() {
            write!(f, "; params {}", self.params.join(", "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_and_names() {
        let v = VarSpec::new("x", "y", &["nu", "p1"]);
        assert_eq!(v.slot("x"), Some(0));
        assert_eq!(v.slot("y"), Some(1));
        assert_eq!(v.slot("nu"), Some(2));
        assert_eq!(v.slot("p1"), Some(3));
        assert_eq!(v.slot("z"), None);
        assert_eq!(v.name(3), "p1");
        assert_eq!(v.arity(), 4);
    }

    #[test]
    fn rejects_duplicates() {
        let spec = VarSpec {
            first: "x".into(),
            second: "x".into(),
            params: vec![],
        };
        assert!(spec.validate().is_err());
    }
}
