//! Point files, the OSM-XML subset and CSV number formatting.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::space::{Graph, GraphEdge, GraphNode, Point};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Gis { path: String, line: usize, message: String },
    #[error("{path}: {message}")]
    Osm { path: String, message: String },
}

/// One line of a point file: coordinates plus `key=value` attributes in
/// file order.
#[derive(Clone, Debug, PartialEq)]
pub struct GisPoint {
    pub x: f64,
    pub y: f64,
    pub attributes: Vec<(String, String)>,
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.display().to_string(), source })
}

pub fn load_gis_points(path: &Path) -> Result<Vec<GisPoint>, LoadError> {
    let text = read(path)?;
    parse_gis_points(&text).map_err(|(line, message)| LoadError::Gis {
        path: path.display().to_string(),
        line,
        message,
    })
}

/// Parses `x,y[,key=value...]` lines. Blank lines and `#` comments are
/// skipped; errors carry the 1-based line number.
pub fn parse_gis_points(text: &str) -> Result<Vec<GisPoint>, (usize, String)> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let coord = |fields: &mut dyn Iterator<Item = &str>| -> Result<f64, (usize, String)> {
            fields
                .next()
                .and_then(|f| f.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| (i + 1, "expected number".to_string()))
        };
        let x = coord(&mut fields)?;
        let y = coord(&mut fields)?;
        let mut attributes = Vec::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| (i + 1, format!("expected key=value, found {f:?}")))?;
            attributes.push((k.trim().to_string(), v.trim().to_string()));
        }
        points.push(GisPoint { x, y, attributes });
    }
    Ok(points)
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Great-circle distance in metres.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

pub fn load_osm_graph(path: &Path) -> Result<Graph, LoadError> {
    let text = read(path)?;
    parse_osm(&text).map_err(|message| LoadError::Osm { path: path.display().to_string(), message })
}

/// Reads `<node id lat lon>` elements and the consecutive `<nd ref>` pairs of
/// every `<way>` tagged `highway`. Node positions are projected
/// equirectangularly in metres around the south-west corner; edge lengths
/// are great-circle distances.
pub fn parse_osm(text: &str) -> Result<Graph, String> {
    let doc = roxmltree::Document::parse(text).map_err(|e| format!("malformed XML: {e}"))?;
    let mut coords = Vec::new();
    let mut index = HashMap::new();
    for n in doc.descendants().filter(|n| n.has_tag_name("node")) {
        let id = n.attribute("id").ok_or("node without id")?;
        let number = |name: &str| -> Result<f64, String> {
            n.attribute(name)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("node {id}: missing or invalid {name}"))
        };
        let (lat, lon) = (number("lat")?, number("lon")?);
        if index.insert(id.to_string(), coords.len()).is_some() {
            return Err(format!("duplicate node id {id}"));
        }
        coords.push((id.to_string(), lat, lon));
    }
    let mut edges = Vec::new();
    for way in doc.descendants().filter(|n| n.has_tag_name("way")) {
        let is_road = way
            .children()
            .any(|c| c.has_tag_name("tag") && c.attribute("k") == Some("highway"));
        if !is_road {
            continue;
        }
        let mut refs = Vec::new();
        for nd in way.children().filter(|c| c.has_tag_name("nd")) {
            let r = nd.attribute("ref").ok_or("nd without ref")?;
            let i = *index.get(r).ok_or_else(|| format!("way references unknown node {r}"))?;
            refs.push(i);
        }
        for pair in refs.windows(2) {
            let (a, b) = (&coords[pair[0]], &coords[pair[1]]);
            edges.push(GraphEdge { a: pair[0], b: pair[1], length: haversine(a.1, a.2, b.1, b.2) });
        }
    }
    let lat0 = coords.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let lon0 = coords.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let mean_lat = coords.iter().map(|c| c.1).sum::<f64>() / coords.len().max(1) as f64;
    let scale = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let nodes = coords
        .into_iter()
        .map(|(key, lat, lon)| GraphNode {
            key,
            pos: Point::new(
                (lon - lon0) * scale * mean_lat.to_radians().cos(),
                (lat - lat0) * scale,
            ),
        })
        .collect();
    Ok(Graph::new(nodes, edges))
}

/// `printf("%g")`: six significant digits, trailing zeros removed,
/// exponent notation outside `[1e-4, 1e6)`.
pub fn format_g(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_file_examples() {
        let pts = parse_gis_points("1.0,2.0\n3.5,4.5").unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[1].x, pts[1].y), (3.5, 4.5));
        assert!(parse_gis_points("").unwrap().is_empty());
        assert_eq!(parse_gis_points("a,b").unwrap_err(), (1, "expected number".to_string()));
        let pts = parse_gis_points("# c\n\n1,2,age=30,name=x\n").unwrap();
        assert_eq!(pts[0].attributes, vec![("age".into(), "30".into()), ("name".into(), "x".into())]);
        assert_eq!(parse_gis_points("1,2\n3").unwrap_err().0, 2);
    }

    #[test]
    fn percent_g_formatting() {
        // reference strings produced by C printf("%g")
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (100.0, "100"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (1.23456789, "1.23457"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (1e100, "1e+100"),
            (0.1 + 0.2, "0.3"),
        ];
        for (v, want) in cases {
            assert_eq!(format_g(v), want, "{v}");
        }
    }

    #[test]
    fn osm_subset() {
        let three = r#"<osm>
            <node id="1" lat="0.0" lon="0.0"/><node id="2" lat="0.0" lon="0.001"/>
            <node id="3" lat="0.0" lon="0.002"/>
            <way id="9"><nd ref="1"/><nd ref="2"/><nd ref="3"/><tag k="highway" v="residential"/></way>
        </osm>"#;
        let g = parse_osm(three).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (3, 2));
        // 0.001 degrees of longitude at the equator
        assert!((g.edges[0].length - 111.195).abs() < 0.01, "{}", g.edges[0].length);

        let dangling = r#"<osm><node id="1" lat="0" lon="0"/>
            <way id="9"><nd ref="1"/><nd ref="42"/><tag k="highway" v="primary"/></way></osm>"#;
        assert!(parse_osm(dangling).unwrap_err().contains("42"));

        let rivers = r#"<osm><node id="1" lat="0" lon="0"/><node id="2" lat="0" lon="1"/>
            <way id="9"><nd ref="1"/><nd ref="2"/><tag k="waterway" v="river"/></way></osm>"#;
        let g = parse_osm(rivers).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (2, 0));

        assert!(parse_osm("<osm><node").is_err());
    }
}
