import logging
from pathlib import Path
from typing import Mapping, Optional, Union

from epsam.config import PipelineConfig, save_config
from epsam.evaluation import EvalReport
from epsam.graph_builder import build_pipeline_graph
from epsam.models.StageManager import STAGES
from epsam.stages import PipelineStages

logger = logging.getLogger(__name__)


def run_pipeline(
    config: PipelineConfig,
    out_dir: Union[str, Path],
    until: Optional[str] = None,
    force: bool = False,
    inputs: Optional[Mapping[str, Union[str, Path]]] = None,
) -> Optional[EvalReport]:
    """
    Runs synth through eval in order, skipping stages whose recorded inputs
    hash and outputs are still current. Returns the report when eval ran.
    """
    stages = PipelineStages(config, out_dir, inputs)
    save_config(config, stages.layout.config)
    graph = build_pipeline_graph(stages, force=force)
    final = graph.invoke(
        {"completed": [], "skipped": [], "until": until, "report": None},
        {"recursion_limit": 2 * len(STAGES) + 5},
    )
    logger.info("ran %s; skipped %s", final["completed"] or "nothing", final["skipped"] or "nothing")
    return final["report"]
