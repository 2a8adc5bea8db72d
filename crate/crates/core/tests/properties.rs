use diary_core::geo::METERS_PER_DEGREE;
use diary_core::*;
use proptest::prelude::*;

const T0: u64 = 1_587_340_800;

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

fn offset(origin: GeoPoint, north_m: f64, east_m: f64) -> GeoPoint {
    let lat = origin.lat() + north_m / METERS_PER_DEGREE;
    let lon = origin.lon() + east_m / (METERS_PER_DEGREE * origin.lat().to_radians().cos());
    pt(lat, lon)
}

/// Winding number in the polygon's own projection, boundary included.
fn winding_contains(p: GeoPoint, poly: &GeoPolygon) -> bool {
    let proj = poly.projection();
    let q = proj.to_xy(p);
    let ring: Vec<(f64, f64)> = poly.vertices().iter().map(|v| proj.to_xy(*v)).collect();
    let n = ring.len();
    let mut wn = 0i32;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        let cross = (b.0 - a.0) * (q.1 - a.1) - (q.0 - a.0) * (b.1 - a.1);
        let seg_len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let within = q.0 >= a.0.min(b.0) - 1e-9
            && q.0 <= a.0.max(b.0) + 1e-9
            && q.1 >= a.1.min(b.1) - 1e-9
            && q.1 <= a.1.max(b.1) + 1e-9;
        if (cross / seg_len).abs() < 1e-6 && within {
            return true;
        }
        if a.1 <= q.1 {
            if b.1 > q.1 && cross > 0.0 {
                wn += 1;
            }
        } else if b.1 <= q.1 && cross < 0.0 {
            wn -= 1;
        }
    }
    wn != 0
}

/// Dense sampling of every edge, interpolated in the local projection.
fn sampled_distance(p: GeoPoint, poly: &GeoPolygon, per_edge: usize) -> f64 {
    let proj = poly.projection();
    let v = poly.vertices();
    let n = v.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (proj.to_xy(v[i]), proj.to_xy(v[(i + 1) % n]));
        for k in 0..=per_edge {
            let t = k as f64 / per_edge as f64;
            let q = proj.to_geo(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            best = best.min(haversine(p, q));
        }
    }
    best
}

fn convex_polygon(center: GeoPoint, radius_m: f64, angles: &mut Vec<f64>) -> GeoPolygon {
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles.dedup_by(|a, b| (*a - *b).abs() < 0.05);
    let verts = angles
        .iter()
        .map(|a| offset(center, radius_m * a.cos(), radius_m * a.sin()))
        .collect();
    GeoPolygon::new(verts).unwrap()
}

fn arb_point() -> impl Strategy<Value = GeoPoint> {
    (-60.0f64..60.0, -170.0f64..170.0).prop_map(|(a, b)| pt(a, b))
}

proptest! {
    #[test]
    fn haversine_metric(a in arb_point(), b in arb_point(), c in arb_point()) {
        let ab = haversine(a, b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, haversine(b, a));
        prop_assert_eq!(haversine(a, a), 0.0);
        let lhs = haversine(a, c);
        let rhs = ab + haversine(b, c);
        prop_assert!(lhs <= rhs * (1.0 + 1e-6) + 1e-6);
    }

    #[test]
    fn grid_round_idempotent_and_within_half_cell(p in arb_point(), cell in prop::sample::select(vec![0.02, 0.05, 0.1, 0.25, 0.3])) {
        let r = grid_round(p, cell);
        prop_assert_eq!(grid_round(r, cell), r);
        prop_assert!((r.lat() - p.lat()).abs() <= cell / 2.0 + 1e-9);
        prop_assert!((r.lon() - p.lon()).abs() <= cell / 2.0 + 1e-9);
    }
}

#[test]
fn point_in_polygon_matches_winding_oracle() {
    let mut runner = proptest::test_runner::TestRunner::new(proptest::test_runner::Config {
        cases: 1000,
        ..Default::default()
    });
    let strat = (
        (-50.0f64..50.0, -100.0f64..100.0),
        200.0f64..3000.0,
        prop::collection::vec(0.0f64..std::f64::consts::TAU, 3..10),
        (-1.5f64..1.5, -1.5f64..1.5),
    );
    runner
        .run(&strat, |((clat, clon), r, mut angles, (fx, fy))| {
            let c = pt(clat, clon);
            angles.push(0.0);
            angles.push(2.5);
            angles.push(4.5);
            let poly = convex_polygon(c, r, &mut angles);
            let p = offset(c, fy * r, fx * r);
            let inside = point_in_polygon(p, &poly);
            prop_assert_eq!(inside, winding_contains(p, &poly));
            let d = distance_to_polygon(p, &poly);
            prop_assert_eq!(d == 0.0, inside);
            // vertices are on the boundary
            prop_assert!(point_in_polygon(poly.vertices()[0], &poly));
            Ok(())
        })
        .unwrap();
}

#[test]
fn distance_matches_dense_edge_sampling() {
    let mut runner = proptest::test_runner::TestRunner::new(proptest::test_runner::Config {
        cases: 60,
        ..Default::default()
    });
    let strat = (
        (-50.0f64..50.0, -100.0f64..100.0),
        200.0f64..1500.0,
        prop::collection::vec(0.0f64..std::f64::consts::TAU, 3..8),
        (-4.0f64..4.0, -4.0f64..4.0),
    );
    runner
        .run(&strat, |((clat, clon), r, mut angles, (fx, fy))| {
            let c = pt(clat, clon);
            angles.extend([0.0, 2.5, 4.5]);
            let poly = convex_polygon(c, r, &mut angles);
            let p = offset(c, fy * r, fx * r);
            if point_in_polygon(p, &poly) {
                return Ok(());
            }
            let per_edge = 10_000 / poly.vertices().len();
            let oracle = sampled_distance(p, &poly, per_edge);
            let d = distance_to_polygon(p, &poly);
            prop_assert!((d - oracle).abs() < 1.0, "{} vs {}", d, oracle);
            Ok(())
        })
        .unwrap();
}

fn arb_trace() -> impl Strategy<Value = Vec<(u64, f64, f64, f64)>> {
    prop::collection::vec((1u64..700, -300.0f64..300.0, -300.0f64..300.0, 0.0f64..90.0), 0..60)
}

fn build_store(steps: &[(u64, f64, f64, f64)]) -> TraceStore {
    let origin = pt(43.7262, 12.6365);
    let mut s = TraceStore::new();
    let mut t = T0;
    for &(dt, n, e, acc) in steps {
        t += dt;
        s.append_sample(LocationSample::gps(t, offset(origin, n, e), acc)).unwrap();
    }
    s.add_known_location(KnownLocation::new("home", "home", origin).home()).unwrap();
    s.add_known_location(KnownLocation::new("work", "work", offset(origin, 150.0, 150.0))).unwrap();
    s
}

proptest! {
    #[test]
    fn dwell_never_exceeds_window(steps in arb_trace(), a in 0u64..20_000, len in 0u64..20_000) {
        let s = build_store(&steps);
        let w = Interval::new(T0 + a, T0 + a + len);
        let total: u64 = s.dwell_segments(w).iter().map(|d| d.dwell).sum();
        prop_assert!(total <= w.len());
    }

    #[test]
    fn expiry_horizon(steps in prop::collection::vec(1u64..200_000, 0..40), now_off in 0u64..8_000_000) {
        let mut s = TraceStore::new();
        let mut t = T0;
        for dt in steps {
            t += dt;
            s.append_sample(LocationSample::gps(t, pt(43.0, 12.0), 5.0)).unwrap();
        }
        let now = T0 + now_off;
        s.expire(now);
        let cutoff = now.saturating_sub(30 * 86_400);
        prop_assert!(s.samples().iter().all(|r| r.sample.timestamp >= cutoff));
    }

    #[test]
    fn geofence_events_disjoint_and_ordered(steps in arb_trace()) {
        let s = build_store(&steps);
        for id in ["home", "work"] {
            let ev: Vec<_> = s.geofence_events().into_iter().filter(|e| e.location_id == id).collect();
            for w in ev.windows(2) {
                prop_assert!(w[0].exit <= w[1].enter);
            }
            prop_assert!(ev.iter().all(|e| e.enter <= e.exit));
        }
    }

    #[test]
    fn stats_invariants(steps in arb_trace()) {
        let s = build_store(&steps);
        let day = day_of(T0);
        for d in day..day + 2 {
            let st = compute_daily_stats(&s, d, InstallationId([1; 16]));
            prop_assert!(st.check().is_ok());
            if let Some(c) = st.centroid {
                let acc: Vec<_> = s.accepted().filter(|x| day_of(x.timestamp) == d).collect();
                let n = acc.len() as f64;
                let lat = acc.iter().map(|x| x.position.lat()).sum::<f64>() / n;
                let lon = acc.iter().map(|x| x.position.lon()).sum::<f64>() / n;
                prop_assert!((c.lat() - lat).abs() <= 0.01 + 1e-9);
                prop_assert!((c.lon() - lon).abs() <= 0.01 + 1e-9);
            }
            prop_assert_eq!(&st, &compute_daily_stats(&s, d, InstallationId([1; 16])));
        }
    }

    #[test]
    fn match_is_deterministic_and_monotone_in_sensitivity(
        steps in arb_trace(),
        start in 0u64..10_000,
        len in 1u64..20_000,
        max_d in 0.0f64..200.0,
        min_e in 0u64..3000,
        tighten_d in 0.0f64..200.0,
        raise_e in 0u64..3000,
    ) {
        let s = build_store(&steps);
        let origin = pt(43.7262, 12.6365);
        let square: Vec<(f64, f64)> = [(-120.0, -120.0), (-120.0, 120.0), (120.0, 120.0), (120.0, -120.0)]
            .iter()
            .map(|(n, e)| { let p = offset(origin, *n, *e); (p.lat(), p.lon()) })
            .collect();
        let raw = |max_distance: f64, min_exposure: u64| RawCta {
            id: "c".into(),
            authority_id: "a".into(),
            regions: vec![RawRegion { vertices: square.clone(), interval: Interval::new(T0 + start, T0 + start + len) }],
            tcns: vec![],
            max_distance,
            min_exposure,
            message: "m".into(),
            created_at: T0,
            expires_at: T0 + 10_000_000,
            coverage_cells: vec![],
        };
        let log = ContactLog::new();
        let base = validate_cta(raw(max_d, min_e)).unwrap();
        let m1 = match_cta(&s, &log, &base, T0).unwrap();
        prop_assert_eq!(&m1, &match_cta(&s, &log, &base, T0).unwrap());
        let stricter = validate_cta(raw((max_d - tighten_d).max(0.0), min_e + raise_e)).unwrap();
        let m2 = match_cta(&s, &log, &stricter, T0).unwrap();
        if m1.is_none() {
            prop_assert!(m2.is_none());
        }
        if let Some(m) = &m1 {
            if m.channel != ExposureChannel::Tcn {
                prop_assert!(m.exposure_seconds >= min_e);
            }
        }
    }

    #[test]
    fn report_expansion_matches_direct_sequence(seed in any::<[u8; 32]>(), created in 0u64..1000, a in 0u64..200, len in 0u64..100) {
        let r = TcnRatchet::new(seed, created);
        let from = created + a;
        let rep = build_report(&r, from, from + len).unwrap();
        let direct: Vec<Tcn> = (from..=from + len).map(|i| r.tcn_at(i).unwrap()).collect();
        prop_assert_eq!(expand_report(&rep), direct);
    }
}
