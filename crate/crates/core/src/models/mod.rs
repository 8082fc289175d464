//! Student transformer, BN-CNN teacher and their shared layer helpers.

pub mod layers;
pub mod student;
pub mod teacher;

pub use student::{patch_embed, StudentConfig, StudentModel, StudentOutput};
pub use teacher::{TeacherConfig, TeacherModel, TeacherOutput};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Pairs of (teacher stage, student MHCA layer), both 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct TapSpec {
    pub pairs: Vec<(usize, usize)>,
}

impl TapSpec {
    /// Teacher stages 1, 2, 3 feed student MHCA layers 2, 3, 4.
    pub fn desk_default() -> Self {
        TapSpec { pairs: alloc::vec![(1, 2), (2, 3), (3, 4)] }
    }

    /// Checks index ranges and strict monotonicity on both sides.
    pub fn validate(&self, teacher_stages: usize, student_mhca: usize) -> Result<()> {
        for (k, &(t, s)) in self.pairs.iter().enumerate() {
            if t == 0 || t > teacher_stages {
                return Err(Error::Config(format!("tap {k}: teacher stage {t} outside 1..={teacher_stages}")));
            }
            if s == 0 || s > student_mhca {
                return Err(Error::Config(format!("tap {k}: student layer {s} outside the MHCA range 1..={student_mhca}")));
            }
            if k > 0 {
                let (pt, ps) = self.pairs[k - 1];
                if t <= pt || s <= ps {
                    return Err(Error::Config(format!("tap {k}: pairs must increase strictly on both sides")));
                }
            }
        }
        Ok(())
    }
}

impl Default for TapSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_validation() {
        assert!(TapSpec::desk_default().validate(3, 4).is_ok());
        assert!(TapSpec::desk_default().validate(3, 3).is_err());
        assert!(TapSpec { pairs: alloc::vec![(2, 2), (1, 3)] }.validate(3, 4).is_err());
        assert!(TapSpec { pairs: alloc::vec![(1, 0)] }.validate(3, 4).is_err());
    }
}
