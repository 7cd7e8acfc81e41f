"""Joint event + RGB-D implicit mapping and tracking on synthetic scenes."""
from .events import EventSimulator, EventStream, accumulate, generate_events, linlog, read_stream, write_stream
from .field import AnalyticField, FieldConfig, SceneField
from .lie import PoseSE3
from .metrics import compute_ate, compute_depth_l1, compute_mesh_metrics, extract_mesh
from .slam import EventSLAM, RunConfig

__version__ = "0.1.0"

__all__ = [
    "AnalyticField", "EventSLAM", "EventSimulator", "EventStream", "FieldConfig", "PoseSE3", "RunConfig",
    "SceneField", "accumulate", "compute_ate", "compute_depth_l1", "compute_mesh_metrics", "extract_mesh",
    "generate_events", "linlog", "read_stream", "write_stream",
]
