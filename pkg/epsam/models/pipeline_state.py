from typing import List, Optional, TypedDict

from epsam.evaluation import EvalReport


class PipelineState(TypedDict):
    completed: List[str]
    skipped: List[str]
    until: Optional[str]
    report: Optional[EvalReport]
