mod common;

use proptest::prelude::*;
use ruinscope::geo::{delaunay, orient2d, Point2};

fn hull_size(points: &[Point2]) -> usize {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let mut h: Vec<Point2> = Vec::new();
    for pass in 0..2 {
        let start = h.len();
        for &q in &p {
            while h.len() >= start + 2 && orient2d(h[h.len() - 2], h[h.len() - 1], q) <= 0.0 {
                h.pop();
            }
            h.push(q);
        }
        h.pop();
        if pass == 0 {
            p.reverse();
        }
    }
    h.len()
}

fn general_position(points: &[Point2]) -> bool {
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if (points[i].x - points[j].x).hypot(points[i].y - points[j].y) < 1e-3 {
                return false;
            }
            for k in j + 1..points.len() {
                if orient2d(points[i], points[j], points[k]).abs() < 1e-3 {
                    return false;
                }
            }
        }
    }
    true
}

fn points() -> impl Strategy<Value = Vec<Point2>> {
    prop::collection::vec((0.0f64..1000.0, 0.0f64..1000.0), 3..40)
        .prop_map(|v| v.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
}

proptest! {
    #![proptest_config(common::config(128))]

    #[test]
    fn euler_counts(pts in points()) {
        prop_assume!(general_position(&pts));
        let tri = delaunay(&pts).unwrap();
        let (n, h) = (pts.len(), hull_size(&pts));
        prop_assert_eq!(tri.triangles.len(), 2 * n - 2 - h);
        prop_assert_eq!(tri.edges.len(), 3 * n - 3 - h);
    }

    #[test]
    fn input_order_does_not_change_the_edge_set(pts in points(), rot in 0usize..40) {
        prop_assume!(general_position(&pts));
        let n = pts.len();
        let shifted: Vec<Point2> = (0..n).map(|i| pts[(i + rot) % n]).collect();
        let a = delaunay(&pts).unwrap();
        let b = delaunay(&shifted).unwrap();
        let mut mapped: Vec<(usize, usize)> = b
            .edges
            .iter()
            .map(|&(i, j)| {
                let (x, y) = ((i + rot) % n, (j + rot) % n);
                (x.min(y), x.max(y))
            })
            .collect();
        mapped.sort_unstable();
        prop_assert_eq!(a.edges, mapped);
    }

    #[test]
    fn collinear_points_form_a_path(n in 2usize..30, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
        prop_assume!(dx.abs() + dy.abs() > 1e-3);
        let pts: Vec<Point2> = (0..n).map(|i| Point2::new(i as f64 * dx, i as f64 * dy)).collect();
        let tri = delaunay(&pts).unwrap();
        prop_assert!(tri.triangles.is_empty());
        let expected: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        prop_assert_eq!(tri.edges, expected);
    }
}
