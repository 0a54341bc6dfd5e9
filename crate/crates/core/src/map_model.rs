//! Isolated pre-built maps: keyframes, landmarks and the map text format.
//!
//! # File format (`VILOMAP 1`)
//!
//! Line oriented, whitespace separated, `#` starts a comment line. Floats are written in
//! the shortest form that parses back to the same value, so `save(load(save(m)))` is
//! byte-identical to `save(m)`.
//!
//! ```text
//! VILOMAP 1
//! map <map id> <keyframe count> <landmark count>
//! camera <fx> <fy> <cx> <cy> <width> <height>
//! kf <id> <qx> <qy> <qz> <qw> <px> <py> <pz> <n> [<landmark id> <u> <v>]{n}
//! lm <id> <x> <y> <z> <n> [<keyframe id>]{n}
//! ```
//!
//! A `kf` record holds the keyframe camera pose `map_t_kf` (JPL quaternion, see
//! [`crate::geometry`]) and the pixels at which it observed landmarks. A `lm` record holds
//! the landmark position in the map frame and the keyframes observing it. All keyframe
//! records precede landmark records.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::{CameraModel, Intrinsics};
use crate::geometry::{RigidTransform, Rotation};
use crate::scalar::Real;

const MAGIC: &str = "VILOMAP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: &'static str, message: String },
    #[error("map invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pixel at which a keyframe observed a landmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeObservation<T: Real> {
    pub landmark: u32,
    pub pixel: Vector2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapKeyframe<T: Real> {
    pub id: u32,
    /// Keyframe camera pose in the map frame.
    pub pose: RigidTransform<T>,
    pub observations: Vec<KeyframeObservation<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark<T: Real> {
    pub id: u32,
    pub position: Vector3<T>,
    pub observers: Vec<u32>,
}

/// An immutable, validated map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapBundle<T: Real> {
    id: u32,
    intrinsics: Intrinsics<T>,
    keyframes: Vec<MapKeyframe<T>>,
    landmarks: Vec<Landmark<T>>,
    keyframe_index: HashMap<u32, usize>,
    landmark_index: HashMap<u32, usize>,
}

/// A landmark projecting into a camera image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibleLandmark<T: Real> {
    pub id: u32,
    pub pixel: Vector2<T>,
    /// Unit bearing in the camera frame.
    pub bearing: Vector3<T>,
}

impl<T: Real> MapBundle<T> {
    pub fn new(
        id: u32,
        intrinsics: Intrinsics<T>,
        keyframes: Vec<MapKeyframe<T>>,
        landmarks: Vec<Landmark<T>>,
    ) -> Result<Self, MapError> {
        if !intrinsics.is_valid() {
            return Err(MapError::Invariant("intrinsics must have positive focal lengths and size".into()));
        }
        let mut keyframe_index = HashMap::with_capacity(keyframes.len());
        for (i, kf) in keyframes.iter().enumerate() {
            if keyframe_index.insert(kf.id, i).is_some() {
                return Err(MapError::Invariant(format!("duplicate keyframe id {}", kf.id)));
            }
            let t = &kf.pose.translation;
            if !(t.x.is_finite() && t.y.is_finite() && t.z.is_finite()) {
                return Err(MapError::Invariant(format!("keyframe {} has a non-finite pose", kf.id)));
            }
        }
        let mut landmark_index = HashMap::with_capacity(landmarks.len());
        for (i, lm) in landmarks.iter().enumerate() {
            if landmark_index.insert(lm.id, i).is_some() {
                return Err(MapError::Invariant(format!("duplicate landmark id {}", lm.id)));
            }
            if lm.observers.is_empty() {
                return Err(MapError::Invariant(format!("landmark {} has no observing keyframe", lm.id)));
            }
            if let Some(missing) = lm.observers.iter().find(|k| !keyframe_index.contains_key(k)) {
                return Err(MapError::Invariant(format!("landmark {} references missing keyframe {missing}", lm.id)));
            }
        }
        for kf in &keyframes {
            if let Some(obs) = kf.observations.iter().find(|o| !landmark_index.contains_key(&o.landmark)) {
                return Err(MapError::Invariant(format!(
                    "keyframe {} observes missing landmark {}",
                    kf.id, obs.landmark
                )));
            }
        }
        Ok(Self { id, intrinsics, keyframes, landmarks, keyframe_index, landmark_index })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn intrinsics(&self) -> &Intrinsics<T> {
        &self.intrinsics
    }

    pub fn keyframes(&self) -> &[MapKeyframe<T>] {
        &self.keyframes
    }

    pub fn landmarks(&self) -> &[Landmark<T>] {
        &self.landmarks
    }

    pub fn keyframe(&self, id: u32) -> Option<&MapKeyframe<T>> {
        self.keyframe_index.get(&id).map(|&i| &self.keyframes[i])
    }

    pub fn landmark(&self, id: u32) -> Option<&Landmark<T>> {
        self.landmark_index.get(&id).map(|&i| &self.landmarks[i])
    }

    /// Pixel at which keyframe `kf` observed landmark `landmark`, if stored.
    pub fn keyframe_observation(&self, kf: u32, landmark: u32) -> Option<Vector2<T>> {
        self.keyframe(kf)?.observations.iter().find(|o| o.landmark == landmark).map(|o| o.pixel)
    }

    /// Landmarks in front of `camera` and inside its image, for an IMU pose `map_t_imu`.
    /// Output order follows the landmark order of the map.
    pub fn landmarks_visible_from(
        &self,
        map_t_imu: &RigidTransform<T>,
        camera: &CameraModel<T>,
    ) -> Vec<VisibleLandmark<T>> {
        let cam_t_map = (*map_t_imu * camera.imu_t_cam).inverse();
        self.landmarks
            .iter()
            .filter_map(|lm| {
                let p = cam_t_map.transform_point(&lm.position);
                let pixel = camera.intrinsics.project(&p)?;
                camera.intrinsics.contains(&pixel).then(|| VisibleLandmark { id: lm.id, pixel, bearing: p.normalize() })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let k = &self.intrinsics;
        // Writing into a String cannot fail.
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "map {} {} {}", self.id, self.keyframes.len(), self.landmarks.len());
        let _ = writeln!(out, "camera {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
        for kf in &self.keyframes {
            let q = kf.pose.rotation.to_jpl();
            let p = kf.pose.translation;
            let _ = write!(
                out,
                "kf {} {} {} {} {} {} {} {} {}",
                kf.id,
                q[0],
                q[1],
                q[2],
                q[3],
                p.x,
                p.y,
                p.z,
                kf.observations.len()
            );
            for o in &kf.observations {
                let _ = write!(out, " {} {} {}", o.landmark, o.pixel.x, o.pixel.y);
            }
            out.push('\n');
        }
        for lm in &self.landmarks {
            let p = lm.position;
            let _ = write!(out, "lm {} {} {} {} {}", lm.id, p.x, p.y, p.z, lm.observers.len());
            for o in &lm.observers {
                let _ = write!(out, " {o}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MapError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (line, header) =
            lines.next().ok_or(MapError::Parse { line: 0, field: "header", message: "empty file".into() })?;
        let mut f = Fields::new(line, header);
        f.keyword(MAGIC, "magic")?;
        let version: u32 = f.parse("version")?;
        if version != VERSION {
            return Err(MapError::Parse { line, field: "version", message: format!("unsupported version {version}") });
        }

        let (line, text) = next_line(&mut lines, "map")?;
        let mut f = Fields::new(line, text);
        f.keyword("map", "record")?;
        let id: u32 = f.parse("map id")?;
        let n_kf: usize = f.parse("keyframe count")?;
        let n_lm: usize = f.parse("landmark count")?;
        f.finish()?;

        let (line, text) = next_line(&mut lines, "camera")?;
        let mut f = Fields::new(line, text);
        f.keyword("camera", "record")?;
        let intrinsics = Intrinsics::new(
            f.parse("fx")?,
            f.parse("fy")?,
            f.parse("cx")?,
            f.parse("cy")?,
            f.parse("width")?,
            f.parse("height")?,
        );
        f.finish()?;

        let mut keyframes = Vec::with_capacity(n_kf);
        for _ in 0..n_kf {
            let (line, text) = next_line(&mut lines, "kf")?;
            let mut f = Fields::new(line, text);
            f.keyword("kf", "record")?;
            let kf_id: u32 = f.parse("keyframe id")?;
            let q = [f.parse("qx")?, f.parse("qy")?, f.parse("qz")?, f.parse("qw")?];
            let rotation = Rotation::from_jpl(q).ok_or(MapError::Parse {
                line,
                field: "quaternion",
                message: "degenerate quaternion".into(),
            })?;
            let translation = Vector3::new(f.parse("px")?, f.parse("py")?, f.parse("pz")?);
            let n: usize = f.parse("observation count")?;
            let mut observations = Vec::with_capacity(n);
            for _ in 0..n {
                let landmark = f.parse("observed landmark id")?;
                let pixel = Vector2::new(f.parse("u")?, f.parse("v")?);
                observations.push(KeyframeObservation { landmark, pixel });
            }
            f.finish()?;
            keyframes.push(MapKeyframe { id: kf_id, pose: RigidTransform::new(rotation, translation), observations });
        }

        let mut landmarks = Vec::with_capacity(n_lm);
        for _ in 0..n_lm {
            let (line, text) = next_line(&mut lines, "lm")?;
            let mut f = Fields::new(line, text);
            f.keyword("lm", "record")?;
            let lm_id: u32 = f.parse("landmark id")?;
            let position = Vector3::new(f.parse("x")?, f.parse("y")?, f.parse("z")?);
            let n: usize = f.parse("observer count")?;
            let observers = (0..n).map(|_| f.parse("observer id")).collect::<Result<Vec<u32>, _>>()?;
            f.finish()?;
            landmarks.push(Landmark { id: lm_id, position, observers });
        }
        if let Some((line, _)) = lines.next() {
            return Err(MapError::Parse {
                line,
                field: "record",
                message: "more records than declared in the header".into(),
            });
        }
        Self::new(id, intrinsics, keyframes, landmarks)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn next_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    expected: &'static str,
) -> Result<(usize, &'a str), MapError> {
    lines.next().ok_or(MapError::Parse { line: 0, field: expected, message: "unexpected end of file".into() })
}

struct Fields<'a> {
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        Self { line, tokens: text.split_whitespace() }
    }

    fn token(&mut self, field: &'static str) -> Result<&'a str, MapError> {
        self.tokens.next().ok_or(MapError::Parse { line: self.line, field, message: "missing".into() })
    }

    fn keyword(&mut self, expected: &str, field: &'static str) -> Result<(), MapError> {
        let tok = self.token(field)?;
        if tok != expected {
            return Err(MapError::Parse {
                line: self.line,
                field,
                message: format!("expected `{expected}`, found `{tok}`"),
            });
        }
        Ok(())
    }

    fn parse<V: std::str::FromStr>(&mut self, field: &'static str) -> Result<V, MapError> {
        let tok = self.token(field)?;
        tok.parse().map_err(|_| MapError::Parse { line: self.line, field, message: format!("cannot parse `{tok}`") })
    }

    fn finish(mut self) -> Result<(), MapError> {
        match self.tokens.next() {
            None => Ok(()),
            Some(tok) => {
                Err(MapError::Parse { line: self.line, field: "record", message: format!("trailing token `{tok}`") })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::body_camera_rotation;

    fn intrinsics() -> Intrinsics<f64> {
        Intrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480)
    }

    fn small_map() -> MapBundle<f64> {
        let kf = |id: u32, x: f64, obs: &[u32]| MapKeyframe {
            id,
            pose: RigidTransform::new(
                Rotation::exp(&Vector3::new(0.01 * x, 0.2, -0.1)),
                Vector3::new(x, 0.5, 1.0 / 3.0),
            ),
            observations: obs
                .iter()
                .map(|&l| KeyframeObservation { landmark: l, pixel: Vector2::new(100.25 + l as f64, 200.0 / 7.0) })
                .collect(),
        };
        let keyframes = vec![kf(10, 0.0, &[1, 2, 3]), kf(11, 1.1, &[3, 4, 5])];
        let landmarks = (1..=5)
            .map(|i| Landmark {
                id: i,
                position: Vector3::new(i as f64 * 0.1, 5.0 + 1e-17, -2.0 / 3.0),
                observers: if i <= 2 {
                    vec![10]
                } else if i == 3 {
                    vec![10, 11]
                } else {
                    vec![11]
                },
            })
            .collect();
        MapBundle::new(4, intrinsics(), keyframes, landmarks).unwrap()
    }

    #[test]
    fn empty_map_is_valid() {
        let m = MapBundle::<f64>::new(1, intrinsics(), vec![], vec![]).unwrap();
        let back = MapBundle::<f64>::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small_map();
        let text = m.to_text();
        let back = MapBundle::<f64>::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);

        let dir = std::env::temp_dir().join(format!("vilo-map-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.map");
        m.save(&path).unwrap();
        assert_eq!(MapBundle::<f64>::load(&path).unwrap(), m);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn missing_keyframe_is_an_invariant_error() {
        let lm = Landmark { id: 1, position: Vector3::zeros(), observers: vec![99] };
        let err = MapBundle::<f64>::new(1, intrinsics(), vec![], vec![lm]).unwrap_err();
        assert!(matches!(err, MapError::Invariant(_)), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_and_field() {
        let text = small_map().to_text().replace("camera 400", "camera nope");
        match MapBundle::<f64>::from_text(&text).unwrap_err() {
            MapError::Parse { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "fx");
            }
            e => panic!("unexpected {e}"),
        }
        let truncated: String = small_map().to_text().lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(matches!(MapBundle::<f64>::from_text(&truncated), Err(MapError::Parse { .. })));
        let wrong_version = small_map().to_text().replace("VILOMAP 1", "VILOMAP 9");
        assert!(matches!(MapBundle::<f64>::from_text(&wrong_version), Err(MapError::Parse { field: "version", .. })));
    }

    #[test]
    fn visibility_filters_behind_camera_and_outside_image() {
        let lms = vec![
            Landmark { id: 1, position: Vector3::new(5.0, 0.0, 0.0), observers: vec![1] },
            Landmark { id: 2, position: Vector3::new(-5.0, 0.0, 0.0), observers: vec![1] },
            Landmark { id: 3, position: Vector3::new(1.0, 30.0, 0.0), observers: vec![1] },
        ];
        let kfs = vec![MapKeyframe { id: 1, pose: RigidTransform::identity(), observations: vec![] }];
        let map = MapBundle::new(1, intrinsics(), kfs, lms).unwrap();
        let cam = CameraModel::new(0, intrinsics(), RigidTransform::new(body_camera_rotation(0.0), Vector3::zeros()));
        let vis = map.landmarks_visible_from(&RigidTransform::identity(), &cam);
        assert_eq!(vis.len(), 1);
        assert_eq!(vis[0].id, 1);
        assert!((vis[0].pixel - Vector2::new(320.0, 240.0)).norm() < 1e-9);
    }

    #[test]
    fn visibility_matches_brute_force_projection() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let lms: Vec<_> = (0..10)
            .map(|i| Landmark {
                id: i,
                position: Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-3.0..3.0),
                ),
                observers: vec![1],
            })
            .collect();
        let kfs = vec![MapKeyframe { id: 1, pose: RigidTransform::identity(), observations: vec![] }];
        let map = MapBundle::new(1, intrinsics(), kfs, lms.clone()).unwrap();
        let cam = CameraModel::new(
            0,
            intrinsics(),
            RigidTransform::new(body_camera_rotation(0.3), Vector3::new(0.1, 0.0, 0.0)),
        );
        let pose = RigidTransform::new(Rotation::from_yaw(-0.2), Vector3::new(-1.0, 0.5, 0.0));
        let vis = map.landmarks_visible_from(&pose, &cam);

        // Oracle: explicit homogeneous projection and frustum test.
        let world_t_cam = (pose * cam.imu_t_cam).to_homogeneous();
        let cam_t_world = world_t_cam.try_inverse().unwrap();
        let expected: Vec<u32> = lms
            .iter()
            .filter(|lm| {
                let p = cam_t_world * lm.position.push(1.0);
                if p.z < 0.1 {
                    return false;
                }
                let u = 400.0 * p.x / p.z + 320.0;
                let v = 400.0 * p.y / p.z + 240.0;
                (0.0..640.0).contains(&u) && (0.0..480.0).contains(&v)
            })
            .map(|lm| lm.id)
            .collect();
        assert_eq!(vis.iter().map(|v| v.id).collect::<Vec<_>>(), expected);
        assert!(!expected.is_empty());
    }
}
