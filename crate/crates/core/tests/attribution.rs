use std::collections::BTreeMap;

use agency_core::attribution::{
    attach_attributes, compute_attributes, geometry_key, AttributeKind, AttributionRequest, ExternalSource, FixtureSource,
};
use agency_core::geometry::{compactness, BBox, GeoPoint, Polygon};
use agency_core::raster::{Band, Grid, GridRaster};
use agency_core::time::{TimeStamp, TimeWindow};
use agency_core::vector::{AttributeValue, Feature, LabelOrigin, LabelStatus, VectorLayer};
use agency_core::workspace::Workspace;
use agency_core::Error;
use proptest::prelude::*;

proptest! {
    #[test]
    fn compactness_in_unit_interval_and_scale_free(n in 3usize..64, r in 0.1..500.0f64, s in 0.01..100.0f64, cx in -1e3..1e3f64, w in 0.1..50.0f64, h in 0.1..50.0f64) {
        let p = Polygon::regular(GeoPoint::new(cx, -cx), r, n);
        let c = compactness(&p).unwrap();
        prop_assert!(c > 0.0 && c <= 1.0, "{c}");
        let big = Polygon::regular(GeoPoint::new(cx * s, -cx * s), r * s, n);
        prop_assert!((compactness(&big).unwrap() - c).abs() <= 1e-9);
        let rect = BBox::new(0.0, 0.0, w, h).unwrap().to_polygon();
        let cr = compactness(&rect).unwrap();
        prop_assert!(cr > 0.0 && cr <= std::f64::consts::FRAC_PI_4 + 1e-12);
    }
}

#[test]
fn square_is_pi_over_four_at_any_scale() {
    for side in [1e-3, 1.0, 37.5, 1e4] {
        let sq = Polygon::square_around(GeoPoint::new(3.0, 4.0), side);
        assert!((compactness(&sq).unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-12, "side {side}");
    }
    // many-sided polygons approach a circle
    assert!(compactness(&Polygon::regular(GeoPoint::new(0.0, 0.0), 1.0, 720)).unwrap() > 0.9999);
}

fn workspace() -> Workspace {
    let roi = BBox::new(0., 0., 40., 40.).unwrap().to_polygon();
    let mut ws = Workspace::new(roi, TimeWindow::new(TimeStamp(0), TimeStamp(100)).unwrap(), 5).unwrap();
    let grid = Grid { origin: GeoPoint::new(0.0, 0.0), cell_size: 10.0, width: 4, height: 4 };
    for (i, t) in [10, 20, 30].into_iter().enumerate() {
        let vals = (0..16).map(|k| k as f64 / 16.0 + i as f64).collect();
        let r = GridRaster::from_bands(grid, vec![Band { name: "ndvi".into(), values: vals }], -9999.0).unwrap().with_timestamp(TimeStamp(t));
        ws.add_raster(format!("ndvi/t{i}"), r).unwrap();
    }
    let mut layer = VectorLayer::new("fields");
    for (id, b) in [("a", BBox::new(0., 0., 20., 20.).unwrap()), ("b", BBox::new(20., 20., 40., 30.).unwrap())] {
        layer
            .insert(Feature {
                id: id.into(),
                geometry: b.to_polygon(),
                attributes: BTreeMap::from([("note".to_string(), AttributeValue::Text { value: "keep".into() })]),
                label: Some("maize".into()),
                label_origin: LabelOrigin::Manual,
                status: LabelStatus::Committed,
                cell: None,
            })
            .unwrap();
    }
    ws.add_vector(layer).unwrap();
    ws
}

fn sources(ws: &Workspace) -> BTreeMap<String, Box<dyn ExternalSource>> {
    let a = &ws.vectors["fields"].features["a"].geometry;
    let fields = BTreeMap::from([("soil".to_string(), AttributeValue::Category { tags: vec!["loam".into()] })]);
    let fx = FixtureSource { source: "soilgrid".into(), entries: BTreeMap::from([(geometry_key(a), fields)]) };
    BTreeMap::from([("soilgrid".to_string(), Box::new(fx) as Box<dyn ExternalSource>)])
}

fn all_kinds() -> Vec<AttributeKind> {
    vec![
        AttributeKind::ShapeArea,
        AttributeKind::ShapePerimeter,
        AttributeKind::ShapeCompactness,
        AttributeKind::ZonalMean { layer: "ndvi/t1".into(), band: "ndvi".into() },
        AttributeKind::Series { layers: vec!["ndvi/t0".into(), "ndvi/t1".into(), "ndvi/t2".into()], band: "ndvi".into() },
        AttributeKind::External { source: "soilgrid".into() },
    ]
}

#[test]
fn attach_only_touches_attributes() {
    let mut ws = workspace();
    let src = sources(&ws);
    let before = ws.clone();
    let req = AttributionRequest { layer: "fields".into(), feature_id: "a".into(), kinds: all_kinds() };
    let f = attach_attributes(&mut ws, &req, &src).unwrap();

    let old = &before.vectors["fields"].features["a"];
    assert_eq!((&f.id, &f.geometry, &f.label, f.label_origin, f.status, f.cell), (&old.id, &old.geometry, &old.label, old.label_origin, old.status, old.cell));
    assert_eq!(f.attributes["note"], old.attributes["note"], "existing attributes survive");
    assert_eq!(f.attributes["shape.area"].as_number(), Some(400.0));
    assert_eq!(f.attributes["shape.perimeter"].as_number(), Some(80.0));
    // cells (0,0),(0,1),(1,0),(1,1) of slice 1: values 1 + {0,1,4,5}/16
    assert_eq!(f.attributes["computed.ndvi_mean"].as_number(), Some(1.0 + 10.0 / 64.0));
    assert!(matches!(&f.attributes["computed.ndvi_series"], AttributeValue::Series { points, .. } if points.len() == 3));
    assert!(f.attributes.contains_key("ext.soilgrid.soil"));

    // nothing outside that one feature changed
    assert_eq!(ws.rasters, before.rasters);
    assert_eq!(ws.vectors["fields"].features["b"], before.vectors["fields"].features["b"]);
    assert_eq!(ws.artifacts, before.artifacts);
}

#[test]
fn failures_leave_the_feature_untouched() {
    let mut ws = workspace();
    let src = sources(&ws);
    let before = ws.clone();
    // b has no fixture entry; the earlier shape attributes must not stick
    let req = AttributionRequest { layer: "fields".into(), feature_id: "b".into(), kinds: all_kinds() };
    assert!(matches!(attach_attributes(&mut ws, &req, &src), Err(Error::FixtureMiss { .. })));
    let missing = AttributionRequest {
        layer: "fields".into(),
        feature_id: "a".into(),
        kinds: vec![AttributeKind::ShapeArea, AttributeKind::ZonalMean { layer: "dem".into(), band: "z".into() }],
    };
    assert!(matches!(attach_attributes(&mut ws, &missing, &src), Err(Error::MissingSourceLayer(_))));
    let nobody = AttributionRequest { layer: "fields".into(), feature_id: "zz".into(), kinds: vec![AttributeKind::ShapeArea] };
    assert!(attach_attributes(&mut ws, &nobody, &src).is_err());
    assert_eq!(ws, before);
}

#[test]
fn fixture_results_are_deterministic_and_reload() {
    let ws = workspace();
    let src = sources(&ws);
    let g = &ws.vectors["fields"].features["a"].geometry;
    let a = compute_attributes(&ws, g, &all_kinds(), &src).unwrap();
    let b = compute_attributes(&ws, g, &all_kinds(), &src).unwrap();
    assert_eq!(a, b);
    // geometry keys depend on the exact coordinates
    assert_eq!(geometry_key(g), geometry_key(&g.clone()));
    let shifted = BBox::new(0., 0., 20., 20.000001).unwrap().to_polygon();
    assert_ne!(geometry_key(g), geometry_key(&shifted));

    let dir = tempfile::tempdir().unwrap();
    let fx = FixtureSource {
        source: "soilgrid".into(),
        entries: BTreeMap::from([(geometry_key(g), BTreeMap::from([("ph".to_string(), AttributeValue::number(6.5, None))]))]),
    };
    std::fs::write(dir.path().join("soilgrid.json"), serde_json::to_string(&fx).unwrap()).unwrap();
    std::fs::write(dir.path().join("ignored.txt"), "x").unwrap();
    let loaded = FixtureSource::load_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded["soilgrid"], fx);
    assert_eq!(loaded["soilgrid"].lookup(g, &ws.time_window).unwrap()["ph"].as_number(), Some(6.5));
}
