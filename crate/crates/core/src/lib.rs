//! Digital-twin treatment optimisation: simulation, virtual-patient cohorts,
//! twin matching, temporal monitors, dose-plan search and in-silico trials.

pub mod cohort;
pub mod model;
pub mod monitor;
pub mod records;
pub mod search;
pub mod sim;
pub mod trial;
pub mod twin;

// The guide's snippets run as doc-tests.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/index.md")]
pub struct GuideIndex;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/simulation.md")]
pub struct GuideSimulation;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cohorts.md")]
pub struct GuideCohorts;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/twins.md")]
pub struct GuideTwins;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/monitors.md")]
pub struct GuideMonitors;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/search.md")]
pub struct GuideSearch;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/trials.md")]
pub struct GuideTrials;
