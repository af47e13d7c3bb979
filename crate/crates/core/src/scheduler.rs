//! Frame scheduling: split a sequence into coding units with intra frames at
//! both ends and `k` inter frames in between. Adjacent units share their
//! boundary intra frame so it is coded once.

/// One coding unit: frames `[first, last]` with `last = first + k + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingUnit {
    pub first_intra: usize,
    pub last_intra: usize,
    pub inter_frames: Vec<usize>,
}

impl CodingUnit {
    fn new(first: usize, k: usize) -> Self {
        CodingUnit {
            first_intra: first,
            last_intra: first + k + 1,
            inter_frames: (first + 1..=first + k).collect(),
        }
    }
}

/// Result of [`split_units`]: the tiled units plus any trailing frames that
/// could not form a full unit (coded intra).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub units: Vec<CodingUnit>,
    pub trailing_intras: Vec<usize>,
    /// True when the sequence was too short for even one unit and every
    /// frame was scheduled intra.
    pub degenerate: bool,
}

impl Schedule {
    /// Frame indices coded intra, in coding order, each exactly once.
    pub fn intra_frames(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for unit in &self.units {
            if out.last() != Some(&unit.first_intra) {
                out.push(unit.first_intra);
            }
            out.push(unit.last_intra);
        }
        out.extend(&self.trailing_intras);
        out
    }

    /// Every scheduled frame exactly once, ascending.
    pub fn all_frames(&self) -> Vec<usize> {
        let mut out = self.intra_frames();
        for unit in &self.units {
            out.extend(&unit.inter_frames);
        }
        out.sort_unstable();
        out
    }
}

/// Tile `frame_count` frames into units of `k + 2` with shared boundary
/// intras. Sequences shorter than one unit degenerate to all-intra.
pub fn split_units(frame_count: usize, k: usize) -> Schedule {
    assert!(k >= 1, "k must be at least 1");
    if frame_count < k + 2 {
        return Schedule {
            units: Vec::new(),
            trailing_intras: (0..frame_count).collect(),
            degenerate: true,
        };
    }
    let mut units = Vec::new();
    let mut first = 0;
    while first + k + 1 < frame_count {
        units.push(CodingUnit::new(first, k));
        first += k + 1;
    }
    Schedule {
        units,
        trailing_intras: (first + 1..frame_count).collect(),
        degenerate: false,
    }
}
