from functools import partial  # To pass extra arguments to node functions

from langgraph.graph import END, StateGraph

from epsam.models.pipeline_state import PipelineState
from epsam.models.StageManager import STAGES
from epsam.stages import PipelineStages
from epsam.util.print import print_stage_graph


def run_stage_node(state: PipelineState, stages: PipelineStages, stage: str, force: bool) -> PipelineState:
    ran = stages.run_stage(stage, force=force)
    key = "completed" if ran else "skipped"
    state[key] = state[key] + [stage]
    if stage == "eval":
        state["report"] = stages.report
    return state


def check_end_condition(state: PipelineState, stages: PipelineStages, stage: str) -> str:
    if stage == STAGES[-1] or state.get("until") == stage:
        print("------------------------Pipeline finished-------------------------------", flush=True)
        print_stage_graph(stages.manager.graph, STAGES[0])
        return "end"
    return "continue"


def build_pipeline_graph(stages: PipelineStages, force: bool = False):
    graph_builder = StateGraph(PipelineState)

    for stage in STAGES:
        graph_builder.add_node(stage, partial(run_stage_node, stages=stages, stage=stage, force=force))
    graph_builder.set_entry_point(STAGES[0])

    for stage, following in zip(STAGES, STAGES[1:] + (END,)):
        graph_builder.add_conditional_edges(
            stage,
            partial(check_end_condition, stages=stages, stage=stage),
            {"end": END, "continue": following},
        )

    return graph_builder.compile()
