/// One decided day on the current search path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrailEntry {
    pub day: u32,
    /// Alternatives for this day not yet explored.
    pub untried: usize,
}

/// Day to resume from after a violation witnessed at `witness_time`.
///
/// A dose on day `d` is given at `t = d` and samples are taken before dosing,
/// so only decisions on days strictly before the witness can have caused it.
/// Returns the latest such day that still has alternatives; days in between
/// are skipped in one jump. Returns 0 when nothing qualifies, in which case
/// the caller restarts from day 0 or, if day 0 is spent, stops.
pub fn backjump_target(witness_time: f64, trail: &[TrailEntry]) -> u32 {
    trail
        .iter()
        .rev()
        .find(|e| (e.day as f64) < witness_time - crate::sim::TIME_EPS && e.untried > 0)
        .map_or(0, |e| e.day)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trail(untried: &[usize]) -> Vec<TrailEntry> {
        untried.iter().enumerate().map(|(d, u)| TrailEntry { day: d as u32, untried: *u }).collect()
    }

    #[test]
    fn all_tried_restarts() {
        assert_eq!(backjump_target(3.0, &trail(&[0, 0, 0])), 0);
    }

    #[test]
    fn latest_open_day_before_witness() {
        assert_eq!(backjump_target(3.0, &trail(&[1, 0, 2])), 2);
        assert_eq!(backjump_target(3.0, &trail(&[1, 2, 0])), 1);
        // Day 3 is not before a witness at t = 3.
        assert_eq!(backjump_target(3.0, &trail(&[1, 0, 0, 4])), 0);
        assert_eq!(backjump_target(2.5, &trail(&[0, 0, 1, 1])), 2);
    }
}
