//! The twelve rows of the generalized force vector and sets of them.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// One row of the 12-component generalized force.
///
/// Rows 0..6 are body-frame forces and torques, rows 6..12 the earth-frame
/// force and the Euler-rate-mapped torque. The control channel that drives
/// each row is noted per variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofId {
    /// Body x force, controls surge velocity.
    Surge,
    /// Body y force, controls sway velocity.
    Sway,
    /// Body z force, controls heave velocity.
    Heave,
    /// Body x torque, controls roll rate.
    RollRate,
    /// Body y torque, controls pitch rate.
    PitchRate,
    /// Body z torque, controls yaw rate.
    YawRate,
    /// Earth x force, controls earth x position.
    X,
    /// Earth y force, controls earth y position.
    Y,
    /// Earth z force, controls depth.
    Depth,
    /// Earth roll torque row, controls roll angle.
    Roll,
    /// Earth pitch torque row, controls pitch angle.
    Pitch,
    /// Earth yaw torque row, controls heading.
    #[serde(alias = "heading")]
    Yaw,
}

impl DofId {
    pub const ALL: [DofId; 12] = [
        DofId::Surge,
        DofId::Sway,
        DofId::Heave,
        DofId::RollRate,
        DofId::PitchRate,
        DofId::YawRate,
        DofId::X,
        DofId::Y,
        DofId::Depth,
        DofId::Roll,
        DofId::Pitch,
        DofId::Yaw,
    ];

    /// Row index in the 12-vector.
    pub fn row(self) -> usize {
        self as usize
    }

    pub fn from_row(row: usize) -> Option<DofId> {
        Self::ALL.get(row).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DofId::Surge => "surge",
            DofId::Sway => "sway",
            DofId::Heave => "heave",
            DofId::RollRate => "roll_rate",
            DofId::PitchRate => "pitch_rate",
            DofId::YawRate => "yaw_rate",
            DofId::X => "x",
            DofId::Y => "y",
            DofId::Depth => "depth",
            DofId::Roll => "roll",
            DofId::Pitch => "pitch",
            DofId::Yaw => "yaw",
        }
    }

    /// Channels whose setpoint is an angle and whose error wraps.
    pub fn is_angle(self) -> bool {
        matches!(self, DofId::Roll | DofId::Pitch | DofId::Yaw)
    }

    /// Body/earth counterpart of the same physical axis.
    pub fn counterpart(self) -> DofId {
        Self::ALL[(self.row() + 6) % 12]
    }
}

impl fmt::Display for DofId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownDof(pub String);

impl fmt::Display for UnknownDof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown degree of freedom '{}'", self.0)
    }
}

impl std::error::Error for UnknownDof {}

impl FromStr for DofId {
    type Err = UnknownDof;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "heading" {
            return Ok(DofId::Yaw);
        }
        DofId::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s)
            .ok_or_else(|| UnknownDof(s.to_string()))
    }
}

/// A set of generalized-force rows, iterated in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DofSet(u16);

impl DofSet {
    pub const EMPTY: DofSet = DofSet(0);
    pub const FULL: DofSet = DofSet(0x0fff);

    pub fn insert(&mut self, dof: DofId) {
        self.0 |= 1 << dof.row();
    }

    pub fn remove(&mut self, dof: DofId) {
        self.0 &= !(1 << dof.row());
    }

    pub fn contains(&self, dof: DofId) -> bool {
        self.0 & (1 << dof.row()) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = DofId> + '_ {
        DofId::ALL.into_iter().filter(|d| self.contains(*d))
    }

    /// Position of `dof` within the set's row order.
    pub fn index_of(&self, dof: DofId) -> Option<usize> {
        self.contains(dof)
            .then(|| (self.0 & ((1u16 << dof.row()) - 1)).count_ones() as usize)
    }
}

impl FromIterator<DofId> for DofSet {
    fn from_iter<I: IntoIterator<Item = DofId>>(iter: I) -> Self {
        let mut s = DofSet::EMPTY;
        for d in iter {
            s.insert(d);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_names_round_trip() {
        for (i, d) in DofId::ALL.iter().enumerate() {
            assert_eq!(d.row(), i);
            assert_eq!(d.name().parse::<DofId>().unwrap(), *d);
        }
        assert_eq!("heading".parse::<DofId>().unwrap(), DofId::Yaw);
        assert!("warp".parse::<DofId>().is_err());
        assert_eq!(DofId::Surge.counterpart(), DofId::X);
        assert_eq!(DofId::Yaw.counterpart(), DofId::YawRate);
    }

    #[test]
    fn set_ordering() {
        let s: DofSet = [DofId::Yaw, DofId::Surge, DofId::Depth].into_iter().collect();
        assert_eq!(s.len(), 3);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![DofId::Surge, DofId::Depth, DofId::Yaw]);
        assert_eq!(s.index_of(DofId::Depth), Some(1));
        assert_eq!(s.index_of(DofId::Pitch), None);
        assert_eq!(DofSet::FULL.len(), 12);
    }
}
