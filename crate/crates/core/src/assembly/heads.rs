use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// The four segmentation outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// All lesions at the first timepoint of the pair.
    AllT1,
    /// All lesions at the second timepoint.
    AllT2,
    /// Lesions present at the second timepoint but not the first.
    NewT2,
    /// Lesions present at the first timepoint but gone at the second.
    VanishingT2,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::AllT1, Head::AllT2, Head::NewT2, Head::VanishingT2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::AllT1 => "all_t1",
            Head::AllT2 => "all_t2",
            Head::NewT2 => "new_t2",
            Head::VanishingT2 => "vanishing_t2",
        }
    }
}

/// Probability maps from the four heads, all in `[0, 1]` on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub s_a_t1: Volume,
    pub s_a_t2: Volume,
    pub s_n_t2: Volume,
    pub s_v_t2: Volume,
}

impl PredictionSet {
    pub fn new(s_a_t1: Volume, s_a_t2: Volume, s_n_t2: Volume, s_v_t2: Volume) -> Result<Self> {
        let p = PredictionSet {
            s_a_t1,
            s_a_t2,
            s_n_t2,
            s_v_t2,
        };
        p.check()?;
        Ok(p)
    }

    pub fn from_array(maps: [Volume; 4]) -> Result<Self> {
        let [a, b, c, d] = maps;
        PredictionSet::new(a, b, c, d)
    }

    /// Verifies grid agreement and the `[0, 1]` range.
    pub fn check(&self) -> Result<()> {
        let grid = self.s_a_t1.grid();
        for (head, map) in self.iter() {
            grid.ensure_compatible(map.grid(), head.name())
                .map_err(|e| Error::Contract(e.to_string()))?;
            if let Some(i) = map.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!(
                    "{} value {} at {:?} outside [0, 1]",
                    head.name(),
                    map.data()[i],
                    grid.coords(i)
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, head: Head) -> &Volume {
        match head {
            Head::AllT1 => &self.s_a_t1,
            Head::AllT2 => &self.s_a_t2,
            Head::NewT2 => &self.s_n_t2,
            Head::VanishingT2 => &self.s_v_t2,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Head, &Volume)> {
        Head::ALL.into_iter().map(move |h| (h, self.get(h)))
    }

    /// Voxelwise mean of several prediction sets.
    pub fn mean(sets: &[PredictionSet]) -> Result<PredictionSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Argument("cannot average zero prediction sets".into()))?;
        let k = sets.len() as f64;
        let maps: Vec<Volume> = Head::ALL
            .iter()
            .map(|&h| {
                let grid = first.get(h).grid().clone();
                for s in sets {
                    grid.ensure_compatible(s.get(h).grid(), "ensemble member")?;
                }
                // summing in sorted order makes the mean independent of member order
                let mut vals = Vec::with_capacity(sets.len());
                let data = (0..grid.len())
                    .map(|i| {
                        vals.clear();
                        vals.extend(sets.iter().map(|s| s.get(h).data()[i]));
                        vals.sort_by(f64::total_cmp);
                        // values in [0, 1] divided by the count can round just past 1
                        (vals.iter().sum::<f64>() / k).clamp(0.0, 1.0)
                    })
                    .collect();
                Volume::new(grid, data)
            })
            .collect::<Result<_>>()?;
        PredictionSet::from_array(maps.try_into().expect("four heads"))
    }
}

/// Ground-truth label maps for one window pair; `None` where not annotated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub all_t1: Option<Mask>,
    pub all_t2: Option<Mask>,
    pub new_t2: Option<Mask>,
    pub vanishing_t2: Option<Mask>,
}

impl Targets {
    pub fn get(&self, head: Head) -> Option<&Mask> {
        match head {
            Head::AllT1 => self.all_t1.as_ref(),
            Head::AllT2 => self.all_t2.as_ref(),
            Head::NewT2 => self.new_t2.as_ref(),
            Head::VanishingT2 => self.vanishing_t2.as_ref(),
        }
    }
}
