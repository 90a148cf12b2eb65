//! Canned model replies for the five tasks.
//!
//! [`CannedProvider`] answers refinement, generation and repair requests with
//! fixed text chosen by task, in one of two personas. The assisted persona
//! writes scripts in the style of the shipped snippets and gets the Delaunay
//! clip wrong once (`InsideOut` instead of `Invert`), fixing it on repair.
//! The unassisted persona reproduces typical single-shot GPT-4 scripts: the
//! isosurface works, the slice and Delaunay scripts set attributes that do
//! not exist, the volume script never switches to volume representation, and
//! the streamline script assigns `Glyph.Scalars`.
//!
//! Recording a benchmark run over this provider yields a replay fixture set
//! that exercises every branch of the loop without network access.

use std::path::Path;

use crate::llm::{ChatMessage, LlmError, LlmProvider, ModelParams, ProviderKind, RecordingProvider};
use crate::prompt::PromptEngine;
use crate::tasks::{list_tasks, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Persona {
    Assisted,
    Unassisted,
}

pub const ISOSURFACE_ASSISTED: &str = r#"from paraview.simple import *

# read the volume
reader = LegacyVTKReader(registrationName='ml-100.vtk', FileNames=['ml-100.vtk'])

# isosurface of var0 at 0.5
contour1 = Contour(registrationName='Contour1', Input=reader)
contour1.ContourBy = ['POINTS', 'var0']
contour1.Isosurfaces = [0.5]

renderView = CreateView('RenderView')
renderView.ViewSize = [1920, 1080]
layout = CreateLayout(name='Layout')
layout.AssignView(0, renderView)

contourDisplay = Show(contour1, renderView)
renderView.ResetCamera()
Render(renderView)

SaveScreenshot('ml-iso-screenshot.png', renderView,
               ImageResolution=[1920, 1080],
               OverrideColorPalette='WhiteBackground')
"#;

pub const SLICE_CONTOUR_ASSISTED: &str = r#"from paraview.simple import *

reader = LegacyVTKReader(registrationName='ml-100.vtk', FileNames=['ml-100.vtk'])

# slice parallel to the y-z plane at x=0
slice1 = Slice(registrationName='Slice1', Input=reader)
slice1.SliceType = 'Plane'
slice1.SliceType.Origin = [0.0, 0.0, 0.0]
slice1.SliceType.Normal = [1.0, 0.0, 0.0]

# contour through the slice at 0.5
contour1 = Contour(registrationName='Contour1', Input=slice1)
contour1.ContourBy = ['POINTS', 'var0']
contour1.Isosurfaces = [0.5]

renderView = CreateView('RenderView')
renderView.ViewSize = [1920, 1080]
layout = CreateLayout(name='Layout')
layout.AssignView(0, renderView)

# red contour
contourDisplay = Show(contour1, renderView)
ColorBy(contourDisplay, None)
contourDisplay.AmbientColor = [1.0, 0.0, 0.0]
contourDisplay.DiffuseColor = [1.0, 0.0, 0.0]

# look down the +x direction
renderView.ResetActiveCameraToPositiveX()
renderView.ResetCamera()
Render(renderView)

SaveScreenshot('ml-slice-iso-screenshot.png', renderView,
               ImageResolution=[1920, 1080],
               OverrideColorPalette='WhiteBackground')
"#;

pub const VOLUME_RENDER_ASSISTED: &str = r#"from paraview.simple import *

reader = LegacyVTKReader(registrationName='ml-100.vtk', FileNames=['ml-100.vtk'])

renderView = CreateView('RenderView')
renderView.ViewSize = [1920, 1080]
layout = CreateLayout(name='Layout')
layout.AssignView(0, renderView)

# volume rendering with the default transfer function
display = Show(reader, renderView)
display.SetRepresentationType('Volume')
ColorBy(display, ('POINTS', 'var0'))
display.RescaleTransferFunctionToDataRange(True, False)

renderView.ApplyIsometricView()
renderView.ResetCamera()
Render(renderView)

SaveScreenshot('ml-dvr-screenshot.png', renderView,
               ImageResolution=[1920, 1080])
"#;

const DELAUNAY_TEMPLATE: &str = r#"from paraview.simple import *

reader = ExodusIIReader(registrationName='can_points.ex2', FileName=['can_points.ex2'])

# 3d Delaunay triangulation
delaunay3D1 = Delaunay3D(registrationName='Delaunay3D1', Input=reader)

# clip with a y-z plane at x=0, keep the -x half
clip1 = Clip(registrationName='Clip1', Input=delaunay3D1)
clip1.ClipType = 'Plane'
clip1.ClipType.Origin = [0.0, 0.0, 0.0]
clip1.ClipType.Normal = [1.0, 0.0, 0.0]
clip1.@KEEP@ = 1

renderView = CreateView('RenderView')
renderView.ViewSize = [1920, 1080]
layout = CreateLayout(name='Layout')
layout.AssignView(0, renderView)

clipDisplay = Show(clip1, renderView)
clipDisplay.SetRepresentationType('Wireframe')

renderView.ApplyIsometricView()
renderView.ResetCamera()
Render(renderView)

SaveScreenshot('points-surf-clip-screenshot.png', renderView,
               ImageResolution=[1920, 1080],
               OverrideColorPalette='WhiteBackground')
"#;

/// Streamline script as an assisted model writes it on the first try.
pub const STREAMLINE_ASSISTED: &str = r#"from paraview.simple import *

# Reading the disk.ex2 file
reader = ExodusIIReader(FileName='disk.ex2')
reader.UpdatePipeline()

# Tracing streamlines of the V data array seeded from a default point cloud
streamTracer = StreamTracer(registrationName='StreamTracer1', Input=reader,
                            SeedType='Point Cloud')
#streamTracer.Vectors = ['POINTS', 'V']

# Rendering the streamlines with tubes for better visibility
tube = Tube(registrationName='Tube1', Input=streamTracer)
tube.Radius = 0.075

# Adding cone glyphs to the streamlines to indicate direction
glyph = Glyph(registrationName='Glyph1', Input=streamTracer, GlyphType='Cone')
glyph.OrientationArray = ['POINTS', 'V']
glyph.ScaleArray = ['POINTS', 'V']
glyph.ScaleFactor = 0.05

# Create a new view and set its properties
renderView = CreateView('RenderView')
renderView.ViewSize = [1920, 1080]

# Create a new layout object
layout = CreateLayout(name='Layout')
layout.AssignView(0, renderView)

# Coloring both the streamlines and glyphs using the Temp data array
tubeDisplay = Show(tube, renderView)
glyphDisplay = Show(glyph, renderView)
ColorBy(tubeDisplay, ('POINTS', 'Temp'))
ColorBy(glyphDisplay, ('POINTS', 'Temp'))
tubeDisplay.RescaleTransferFunctionToDataRange(True)
glyphDisplay.RescaleTransferFunctionToDataRange(True)

# Orienting the view to look from the +X direction
renderView.ResetActiveCameraToPositiveX()
renderView.ResetCamera()

# Save a screenshot of the render view
SaveScreenshot('stream-glyph-screenshot.png', renderView,
               ImageResolution=[1920, 1080],
               OverrideColorPalette='WhiteBackground')
"#;

/// Single-shot streamline script with invalid `Glyph` attributes.
pub const STREAMLINE_UNASSISTED: &str = r#"from paraview.simple import *

# Disable automatic camera reset on 'Show'
paraview.simple._DisableFirstRenderCameraReset()

# Read in the file
disk_ex2 = ExodusIIReader(FileName=['disk.ex2'])
disk_ex2.PointVariables = ['V', 'Temp']

# Create a stream tracer
streamTracer = StreamTracer(Input=disk_ex2,
                            SeedType='Point Cloud')
streamTracer.Vectors = ['POINTS', 'V']
streamTracer.SeedType.NumberOfPoints = 100  # using default point cloud

# Render the streamlines with tubes
tube = Tube(Input=streamTracer)
tube.Radius = 0.05

# Add cone glyphs to the streamlines
coneGlyph = Glyph(Input=tube,
                  GlyphType='Cone')
coneGlyph.Scalars = ['POINTS', 'Temp']
coneGlyph.Vectors = ['POINTS', 'V']
coneGlyph.ScaleFactor = 1.0

# Coloring both the streamlines and glyphs by the Temp data array
tubeRepresentation = Show(tube, 'RenderView1')
tubeRepresentation.ColorArrayName = ['POINTS', 'Temp']
tubeRepresentation.LookupTable = GetLookupTableForArray('Temp', 1)

glyphRepresentation = Show(coneGlyph, 'RenderView1')
glyphRepresentation.ColorArrayName = ['POINTS', 'Temp']
glyphRepresentation.LookupTable = GetLookupTableForArray('Temp', 1)

# Get the active view and set the view direction
renderView1 = GetActiveViewOrCreate('RenderView')
renderView1.ViewSize = [1920, 1080]
# looking from +X direction
renderView1.CameraPosition = [1, 0, 0]
renderView1.CameraFocalPoint = [0, 0, 0]
renderView1.CameraViewUp = [0, 0, 1]

# Save a screenshot
SaveScreenshot('stream-glyph-screenshot.png', renderView1,
               ImageResolution=[1920, 1080])

# Render the final view
Render()
"#;

pub const ISOSURFACE_UNASSISTED: &str = r#"from paraview.simple import *

# Load the data
reader = LegacyVTKReader(FileNames=['ml-100.vtk'])

# Create the isosurface
contour = Contour(Input=reader)
contour.ContourBy = ['POINTS', 'var0']
contour.Isosurfaces = [0.5]

# Show it
renderView1 = GetActiveViewOrCreate('RenderView')
renderView1.ViewSize = [1920, 1080]
contourDisplay = Show(contour, renderView1)
renderView1.ResetCamera()
Render()

# Save the screenshot
SaveScreenshot('ml-iso-screenshot.png', renderView1, ImageResolution=[1920, 1080])
"#;

pub const SLICE_CONTOUR_UNASSISTED: &str = r#"from paraview.simple import *

reader = LegacyVTKReader(FileNames=['ml-100.vtk'])

# Slice in the y-z plane at x = 0
slice1 = Slice(Input=reader)
slice1.SliceType = 'Plane'
slice1.SliceType.Origin = [0, 0, 0]
slice1.SliceType.Normal = [1, 0, 0]

# Contour at 0.5
contour1 = Contour(Input=slice1)
contour1.ContourBy = ['POINTS', 'var0']
contour1.Isosurfaces = [0.5]

renderView1 = GetActiveViewOrCreate('RenderView')
renderView1.ViewSize = [1920, 1080]
contour1Display = Show(contour1, renderView1)
contour1Display.DiffuseColor = [1, 0, 0]

# Look at the +x direction
renderView1.CameraPosition = [-10, 0, 0]
renderView1.CameraFocalPoint = [0, 0, 0]
renderView1.ViewUp = [0, 0, 1]
Render()

SaveScreenshot('ml-slice-iso-screenshot.png', renderView1, ImageResolution=[1920, 1080])
"#;

pub const VOLUME_RENDER_UNASSISTED: &str = r#"from paraview.simple import *

reader = LegacyVTKReader(FileNames=['ml-100.vtk'])

renderView1 = GetActiveViewOrCreate('RenderView')
renderView1.ViewSize = [1920, 1080]

# Volume rendering with the default transfer function
readerDisplay = Show(reader, renderView1)
ColorBy(readerDisplay, ('POINTS', 'var0'))
readerDisplay.RescaleTransferFunctionToDataRange(True)

# Isometric view
renderView1.CameraPosition = [1, 1, 1]
renderView1.CameraFocalPoint = [0, 0, 0]
renderView1.CameraViewUp = [0, 0, 1]
renderView1.ResetCamera()
Render()

SaveScreenshot('ml-dvr-screenshot.png', renderView1, ImageResolution=[1920, 1080])
"#;

pub const DELAUNAY_UNASSISTED: &str = r#"from paraview.simple import *

reader = ExodusIIReader(FileName=['can_points.ex2'])

# 3D Delaunay triangulation
delaunay = Delaunay3D(Input=reader)

# Clip with the y-z plane at x = 0, keeping the -x half
clipFilter = Clip(Input=delaunay)
clipFilter.ClipType = 'Plane'
clipFilter.ClipType.Origin = [0, 0, 0]
clipFilter.ClipType.Normal = [1, 0, 0]
clipFilter.InsideOut = 1

renderView1 = GetActiveViewOrCreate('RenderView')
renderView1.ViewSize = [1920, 1080]
clipDisplay = Show(clipFilter, renderView1)
clipDisplay.SetRepresentationType('Wireframe')

renderView1.CameraPosition = [1, 1, 1]
renderView1.CameraFocalPoint = [0, 0, 0]
renderView1.ResetCamera()
Render()

SaveScreenshot('points-surf-clip-screenshot.png', renderView1, ImageResolution=[1920, 1080])
"#;

/// First assisted Delaunay attempt: `Clip` has no `InsideOut` property.
pub fn delaunay_assisted_first() -> String {
    DELAUNAY_TEMPLATE.replace("@KEEP@", "InsideOut")
}

pub fn delaunay_assisted_fixed() -> String {
    DELAUNAY_TEMPLATE.replace("@KEEP@", "Invert")
}

/// The script the assisted persona ends with.
pub fn assisted_final(task: TaskId) -> String {
    match task {
        TaskId::Isosurface => ISOSURFACE_ASSISTED.to_string(),
        TaskId::SliceContour => SLICE_CONTOUR_ASSISTED.to_string(),
        TaskId::VolumeRender => VOLUME_RENDER_ASSISTED.to_string(),
        TaskId::Delaunay => delaunay_assisted_fixed(),
        TaskId::Streamline => STREAMLINE_ASSISTED.to_string(),
    }
}

fn assisted_first(task: TaskId) -> String {
    match task {
        TaskId::Delaunay => delaunay_assisted_first(),
        other => assisted_final(other),
    }
}

pub fn unassisted(task: TaskId) -> &'static str {
    match task {
        TaskId::Isosurface => ISOSURFACE_UNASSISTED,
        TaskId::SliceContour => SLICE_CONTOUR_UNASSISTED,
        TaskId::VolumeRender => VOLUME_RENDER_UNASSISTED,
        TaskId::Delaunay => DELAUNAY_UNASSISTED,
        TaskId::Streamline => STREAMLINE_UNASSISTED,
    }
}

/// Step-by-step rewrite returned for the refinement request.
pub fn refined_reply(task: TaskId) -> &'static str {
    match task {
        TaskId::Isosurface => "Generate a Python script using ParaView for performing visualization tasks based on the provided steps. This script utilizes ParaView to visualize an isosurface from the ml-100.vtk file. Operations include reading the file, generating an isosurface, setting the view resolution, and saving a screenshot. Requirements step-by-step:
- Read the file ml-100.vtk given the path.
- Generate an isosurface of the variable var0 at value 0.5.
- Configure the rendered view resolution to 1920 x 1080 pixels.
- Save a screenshot of the rendered view to ml-iso.png.",
        TaskId::SliceContour => "Generate a Python script using ParaView for performing visualization tasks based on the provided steps. This script slices ml-100.vtk, contours the slice and colors the contour. Requirements step-by-step:
- Read the file ml-100.vtk.
- Slice the volume with a plane parallel to the y-z plane at x=0 (origin [0, 0, 0], normal [1, 0, 0]).
- Take a contour of var0 through the slice at the value 0.5.
- Show the contour and color it red.
- Rotate the view to look at the +x direction.
- Set the rendered view to 1920 x 1080 pixels.
- Save a screenshot of the result to ml-slice-iso-screenshot.png at 1920 x 1080 pixels.",
        TaskId::VolumeRender => "Generate a Python script using ParaView for performing visualization tasks based on the provided steps. This script volume renders ml-100.vtk. Requirements step-by-step:
- Read the file ml-100.vtk.
- Show the data and switch the representation to volume rendering with the default transfer function.
- Rotate the view to an isometric direction and reset the camera.
- Set the rendered view to 1920 x 1080 pixels.
- Save a screenshot of the result to ml-dvr-screenshot.png at 1920 x 1080 pixels.",
        TaskId::Delaunay => "Generate a Python script using ParaView for performing visualization tasks based on the provided steps. This script triangulates the points in can_points.ex2 and clips the mesh. Requirements step-by-step:
- Read the file can_points.ex2.
- Generate a 3d Delaunay triangulation of the dataset.
- Clip the data with a y-z plane at x=0 (origin [0, 0, 0], normal [1, 0, 0]), keeping the -x half and removing the +x half.
- Render the clipped data as a wireframe.
- View the result in an isometric view.
- Set the rendered view to 1920 x 1080 pixels.
- Save a screenshot of the result to points-surf-clip-screenshot.png at 1920 x 1080 pixels.",
        TaskId::Streamline => "Generate a Python script using ParaView for performing visualization tasks based on the provided steps. This script traces streamlines through disk.ex2 and decorates them. Requirements step-by-step:
- Read the file disk.ex2.
- Trace streamlines of the V data array seeded from a default point cloud.
- Render the streamlines with tubes.
- Add cone glyphs to the streamlines.
- Color the streamlines and glyphs by the Temp data array.
- View the result in the +X direction.
- Set the rendered view to 1920 x 1080 pixels.
- Save a screenshot of the result to stream-glyph-screenshot.png at 1920 x 1080 pixels.",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Refine,
    Generate,
    Repair,
}

/// Answers with canned text per task and prompt stage.
#[derive(Debug, Clone)]
pub struct CannedProvider {
    persona: Persona,
    refine_system: String,
    generate_system: String,
    repair_system: String,
}

impl CannedProvider {
    /// `engine` must be the one the sessions use; stages are recognized by
    /// their system message.
    pub fn new(persona: Persona, engine: &PromptEngine) -> Self {
        let version = [("paraview_version", engine.paraview_version.as_str())];
        Self {
            persona,
            refine_system: engine.templates.refine_system.render(&[]),
            generate_system: engine.templates.generate_system.render(&version),
            repair_system: engine.templates.repair_system.render(&version),
        }
    }

    fn stage(&self, messages: &[ChatMessage]) -> Option<Stage> {
        let system = &messages.first()?.content;
        if *system == self.refine_system {
            Some(Stage::Refine)
        } else if *system == self.generate_system {
            Some(Stage::Generate)
        } else if *system == self.repair_system {
            Some(Stage::Repair)
        } else {
            None
        }
    }
}

fn fenced(script: &str) -> String {
    format!("```python\n{script}```\n")
}

impl LlmProvider for CannedProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Scripted
    }

    fn complete(&self, messages: &[ChatMessage], _params: &ModelParams) -> Result<String, LlmError> {
        let last = &messages.last().ok_or(LlmError::EmptyMessages)?.content;
        let stage = self
            .stage(messages)
            .ok_or_else(|| LlmError::Malformed("unrecognized prompt stage".into()))?;
        let task = list_tasks()
            .into_iter()
            .find(|t| last.contains(&t.expected_screenshot))
            .map(|t| t.id)
            .ok_or_else(|| LlmError::Malformed("no known task in prompt".into()))?;
        Ok(match (self.persona, stage) {
            (Persona::Assisted, Stage::Refine) => refined_reply(task).to_string(),
            (Persona::Assisted, Stage::Generate) => fenced(&assisted_first(task)),
            (Persona::Assisted, Stage::Repair) => fenced(&assisted_final(task)),
            (Persona::Unassisted, Stage::Refine) => last.clone(),
            (Persona::Unassisted, _) => fenced(unassisted(task)),
        })
    }
}

/// Labels of the two canned entrants.
pub const ASSISTED_LABEL: &str = "assisted";
pub const UNASSISTED_LABEL: &str = "unassisted";

/// Runs the canned benchmark with recording providers, writing one replay
/// fixture directory per entrant (`<dir>/assisted`, `<dir>/unassisted`).
/// Returns the number of fixture files written.
pub fn record_fixtures(dir: &Path, config: &crate::session::SessionConfig) -> std::io::Result<usize> {
    use crate::simulate::SimulatedExecutor;
    use crate::tasks::{run_benchmark, BenchOptions, Entrant, Mode};
    use std::sync::Arc;

    let mut entrants = Vec::new();
    for (label, persona, mode) in [
        (ASSISTED_LABEL, Persona::Assisted, Mode::Assisted),
        (UNASSISTED_LABEL, Persona::Unassisted, Mode::Unassisted),
    ] {
        let target = dir.join(label);
        if target.exists() {
            std::fs::remove_dir_all(&target)?;
        }
        let provider = RecordingProvider::new(CannedProvider::new(persona, &config.prompts), target)?;
        entrants.push(Entrant {
            label: label.to_string(),
            provider: Arc::new(provider),
            mode,
        });
    }
    let factory = |t: &crate::tasks::TaskSpec| -> Box<dyn crate::executor::ScriptExecutor> {
        Box::new(SimulatedExecutor::for_task(t))
    };
    run_benchmark(&list_tasks(), &entrants, config, &factory, &BenchOptions::default());
    let mut count = 0;
    for label in [ASSISTED_LABEL, UNASSISTED_LABEL] {
        count += std::fs::read_dir(dir.join(label))?.count();
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::extract_call_sequence;
    use crate::tasks::task;

    #[test]
    fn scripts_name_their_task_screenshot() {
        for id in TaskId::ALL {
            let shot = task(id).expected_screenshot;
            assert!(assisted_final(id).contains(&shot));
            assert!(assisted_first(id).contains(&shot));
            assert!(unassisted(id).contains(&shot));
            assert!(refined_reply(id).contains(&shot) || id == TaskId::Isosurface);
        }
    }

    #[test]
    fn streamline_assisted_call_sequence() {
        let calls = extract_call_sequence(STREAMLINE_ASSISTED);
        assert_eq!(
            &calls[..12],
            [
                "ExodusIIReader",
                "UpdatePipeline",
                "StreamTracer",
                "Tube",
                "Glyph",
                "CreateView",
                "CreateLayout",
                "AssignView",
                "Show",
                "Show",
                "ColorBy",
                "ColorBy"
            ]
        );
        assert_eq!(calls.last().unwrap(), "SaveScreenshot");
    }

    #[test]
    fn stage_detection() {
        let engine = PromptEngine::default();
        let p = CannedProvider::new(Persona::Assisted, &engine);
        let params = ModelParams::default();
        let request = crate::prompt::UserRequest::new(task(TaskId::Delaunay).prompt_text, "d").unwrap();
        let refine = engine.refine_messages(&request);
        assert_eq!(p.complete(&refine, &params).unwrap(), refined_reply(TaskId::Delaunay));
        let refined = crate::prompt::RefinedPrompt::passthrough(&request);
        let gen = engine.build_generation_messages(&refined, &[]).messages;
        assert!(p.complete(&gen, &params).unwrap().contains("clip1.InsideOut = 1"));
        let bad = [ChatMessage::system("other"), ChatMessage::user("x")];
        assert!(matches!(p.complete(&bad, &params), Err(LlmError::Malformed(_))));
    }
}
