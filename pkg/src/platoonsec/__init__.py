"""Ring-road CACC platoon simulator with observer-based V2X / V2I attack detection."""

from platoonsec.config import load_config
from platoonsec.engine import ScenarioConfig, SimLog, SummaryReport, run_scenario, summarize

__all__ = ["ScenarioConfig", "SimLog", "SummaryReport", "load_config", "run_scenario", "summarize"]
__version__ = "0.1.0"
