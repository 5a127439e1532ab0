//! Frame rendering shared by `render`, `bench` and the acceptance suite.

use std::io::BufWriter;
use std::path::Path;
use std::time::{Duration, Instant};

use glam::DVec3;
use relight_bake::cnn::CnnSurface;
use relight_bake::{DirectRenderer, HashRenderer};
use relight_core::envlight::{EnvLight, EnvironmentMap};
use relight_core::image::Image;
use relight_core::integrator::{shade_frame, FrameOutput, ShadeConfig, Teacher};
use relight_core::metrics::{tonemap_rgb, FrameTiming};
use relight_core::scene::{Camera, PoseSampler, SdfScene};
use relight_core::svgf::{denoise, AuxBuffers, SvgfConfig};

use crate::{Error, Provider, Result, Settings};

/// The two baked students.
pub struct Baked {
    pub cnn: DirectRenderer<f32>,
    pub hash: HashRenderer<f32>,
}

impl Baked {
    pub fn load(cnn: &Path, hash: &Path) -> Result<Baked> {
        Ok(Baked {
            cnn: DirectRenderer::load(cnn)?.0,
            hash: HashRenderer::load(hash)?.0,
        })
    }

    pub fn from_settings(s: &Settings) -> Result<Option<Baked>> {
        match s.provider {
            Provider::Teacher => Ok(None),
            Provider::Baked => Ok(Some(Baked::load(
                Settings::require(&s.cnn, "cnn")?,
                Settings::require(&s.hash, "hash")?,
            )?)),
        }
    }
}

pub fn load_env(path: &Path) -> Result<EnvLight> {
    Ok(EnvLight::new(EnvironmentMap::load(path)?)?)
}

/// The orbit camera at the configured azimuth and elevation.
pub fn view_camera(scene: &SdfScene, s: &Settings) -> Result<Camera> {
    Ok(PoseSampler::for_scene(scene, s.width, s.height).camera_at(s.azimuth_deg.to_radians(), s.elevation_deg.to_radians())?)
}

pub struct Rendered {
    pub frame: FrameOutput,
    /// Denoised radiance, or the raw frame with denoising off.
    pub image: Vec<DVec3>,
    pub dnsr: Duration,
}

impl Rendered {
    pub fn timing(&self) -> FrameTiming {
        FrameTiming {
            stages: self.frame.times,
            dnsr: self.dnsr,
        }
    }
}

pub fn render_view(scene: &SdfScene, env: &EnvLight, baked: Option<&Baked>, camera: &Camera, s: &Settings) -> Result<Rendered> {
    let mut cfg = ShadeConfig::new(env, s.spp, s.bounces, s.seed);
    cfg.secondary_rays = s.secondary_rays;
    let frame = match baked {
        None => {
            let t = Teacher::new(scene);
            shade_frame(&t, &t, &cfg, camera)?
        }
        Some(b) => shade_frame(&CnnSurface { model: &b.cnn }, &b.hash, &cfg, camera)?,
    };
    if let Some(i) = frame.radiance.iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("non-finite radiance at pixel {i}")));
    }
    let t = Instant::now();
    let image = if s.denoise {
        let aux = AuxBuffers {
            width: frame.width,
            height: frame.height,
            depth: &frame.depth,
            normal: &frame.normal,
            depth_gradient: &frame.depth_gradient,
            mask: &frame.mask,
            albedo: &frame.albedo,
        };
        denoise(&frame.radiance, &aux, &SvgfConfig::default())?
    } else {
        frame.radiance.clone()
    };
    Ok(Rendered {
        dnsr: if s.denoise { t.elapsed() } else { Duration::ZERO },
        frame,
        image,
    })
}

pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[DVec3]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(&tonemap_rgb(pixels)).map_err(io)?;
    w.finish().map_err(io)
}

/// Output files of a render, relative to the output directory.
pub const RENDER_FILES: [&str; 6] = ["render.pfm", "render.png", "raw.pfm", "albedo.pfm", "normal.pfm", "depth.pfm"];

pub fn write_rendered(dir: &Path, r: &Rendered) -> Result<()> {
    let (w, h) = (r.frame.width, r.frame.height);
    Image::from_rgb(w, h, &r.image).write_pfm(dir.join("render.pfm"))?;
    write_png(&dir.join("render.png"), w, h, &r.image)?;
    Image::from_rgb(w, h, &r.frame.radiance).write_pfm(dir.join("raw.pfm"))?;
    Image::from_rgb(w, h, &r.frame.albedo).write_pfm(dir.join("albedo.pfm"))?;
    Image::from_rgb(w, h, &r.frame.normal).write_pfm(dir.join("normal.pfm"))?;
    Image::from_gray(w, h, &r.frame.depth).write_pfm(dir.join("depth.pfm"))?;
    Ok(())
}
