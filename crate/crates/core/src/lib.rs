//! Device-side core of a privacy-preserving contact and location tracing
//! system.
//!
//! Everything in this crate is a pure computation over values the device
//! already holds: the location trace, the log of temporary contact numbers
//! heard nearby, and calls to action downloaded from a health authority.
//! Matching a call to action needs no network access.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod builder;
pub mod cta;
pub mod geo;
pub mod stats;
pub mod tcn;
pub mod trace;

pub use builder::{build_cta, detect_stay_points, BuildError, BuildParams, CtaSource, StayPoint, StayPointConfig};
pub use cta::{
    match_cta, match_geo, match_tcn, validate_cta, CallToAction, CtaError, CtaRegion, Expired, ExposureChannel,
    ExposureMatch, GeoExposure, MatchParams, RawCta, RawRegion,
};
pub use geo::{
    bbox_diagonal, distance_to_polygon, grid_round, haversine, point_in_polygon, BoundingBox, CoarseCell, GeoError,
    GeoPoint, GeoPolygon, LocalProjection,
};
pub use stats::{compute_daily_stats, day_of, day_start, DailyStats, InstallationId, StatsError};
pub use tcn::{
    build_report, expand_report, rotation_index, BroadcastLog, ChainKey, ContactLog, ContactRecord, RatchetCursor,
    Tcn, TcnError, TcnRatchet, TcnReport,
};
pub use trace::{
    DwellSegment, GeofenceEvent, Interval, KnownLocation, LocationSample, Note, RecordedSample, SampleSource,
    TraceError, TraceStore,
};
