import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx

from epsam.errors import ConfigurationError
from epsam.util import image_io

logger = logging.getLogger(__name__)

Status = Literal["pending", "running", "done", "failed", "skipped"]
MANIFEST_NAME = "run_manifest.json"

# (stage, upstream stages, config sections hashed into its inputs)
STAGE_SPECS: Tuple[Tuple[str, Tuple[str, ...], Tuple[str, ...]], ...] = (
    ("synth", (), ("syndata", "seed")),
    ("train-cam", ("synth",), ("cam", "seed")),
    ("extract-cam", ("synth", "train-cam"), ("postproc",)),
    ("initmask", ("extract-cam",), ("postproc",)),
    ("prompts", ("synth", "extract-cam", "initmask"), ("pepm",)),
    ("pretrain-decoder", ("synth", "initmask", "prompts"), ("segmenter", "selftrain")),
    ("selftrain", ("synth", "initmask", "prompts", "pretrain-decoder"), ("segmenter", "selftrain")),
    ("infer", ("synth", "train-cam", "selftrain"), ("pepm", "segmenter")),
    ("eval", ("synth", "extract-cam", "initmask", "prompts", "pretrain-decoder", "selftrain", "infer"), ()),
)
STAGES: Tuple[str, ...] = tuple(name for name, _, _ in STAGE_SPECS)


class StageManager:
    """
    Stage dependency DAG for one run directory, with per-stage inputs hashes
    persisted in run_manifest.json so completed stages can be skipped.
    """

    def __init__(
        self,
        run_dir: Union[str, Path],
        sections: Mapping[str, object],
        specs: Sequence[Tuple[str, Tuple[str, ...], Tuple[str, ...]]] = STAGE_SPECS,
        overrides: Optional[Mapping[str, Union[str, Path]]] = None,
    ):
        self.run_dir = Path(run_dir).resolve()
        self.sections = dict(sections)
        self.overrides = {key: Path(value).resolve().as_posix() for key, value in (overrides or {}).items()}
        self.order = [name for name, _, _ in specs]
        self.graph = nx.DiGraph()
        for name, _, hashed in specs:
            self.graph.add_node(name, sections=hashed, status="pending", inputs_hash="", outputs=[])
        for name, upstream, _ in specs:
            for dep in upstream:
                if dep not in self.graph:
                    raise ConfigurationError(f"stage '{name}' depends on unknown stage '{dep}'")
                self.graph.add_edge(dep, name)
        cycle = self.detect_cycles()
        if cycle:
            raise ConfigurationError(f"stage graph has a cycle: {cycle}")
        self.manifest: Dict[str, Dict] = self._read_manifest()
        for stage in self.ordered_stages():
            self.update_node(stage, inputs_hash=self.inputs_hash(stage))

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    def _read_manifest(self) -> Dict[str, Dict]:
        if not self.manifest_path.exists():
            return {}
        try:
            entries = image_io.read_json(self.manifest_path)
        except json.JSONDecodeError:
            logger.warning("ignoring unreadable %s", self.manifest_path)
            return {}
        return {entry["stage"]: entry for entry in entries}

    def _write_manifest(self) -> None:
        entries = [self.manifest[s] for s in self.order if s in self.manifest]
        image_io.write_json(self.manifest_path, entries)

    def detect_cycles(self) -> Optional[List]:
        try:
            return list(nx.find_cycle(self.graph, orientation="original"))
        except nx.exception.NetworkXNoCycle:
            return None

    def ordered_stages(self) -> List[str]:
        return list(nx.lexicographical_topological_sort(self.graph, key=self.order.index))

    def upstream(self, stage: str) -> List[str]:
        return sorted(self.graph.predecessors(stage), key=self.order.index)

    def downstream(self, stage: str) -> List[str]:
        return sorted(nx.descendants(self.graph, stage), key=self.order.index)

    def get_node(self, stage: str) -> Optional[Dict]:
        return self.graph.nodes.get(stage, None)

    def update_node(self, stage: str, **attributes) -> None:
        for attr, value in attributes.items():
            if value is not None:
                self.graph.nodes[stage][attr] = value

    def inputs_hash(self, stage: str) -> str:
        """
        SHA-256 over the stage's config sections, its upstream stages' hashes
        and any input or output locations overridden for this run.
        """
        node = self.graph.nodes[stage]
        payload = {
            "stage": stage,
            "config": {name: self.sections.get(name) for name in node["sections"]},
            "upstream": {dep: self.inputs_hash(dep) for dep in self.upstream(stage)},
        }
        if self.overrides:
            payload["overrides"] = self.overrides
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def is_current(self, stage: str) -> bool:
        entry = self.manifest.get(stage)
        if not entry or entry.get("status") != "done":
            return False
        if entry.get("inputs_hash") != self.inputs_hash(stage):
            return False
        return all((self.run_dir / rel).exists() for rel in entry.get("outputs", []))

    def mark_running(self, stage: str) -> None:
        self.update_node(stage, status="running")

    def mark_skipped(self, stage: str) -> None:
        self.update_node(stage, status="skipped", outputs=self.manifest[stage].get("outputs", []))

    def mark_done(self, stage: str, outputs: Sequence[Union[str, Path]]) -> None:
        relative = sorted(self._relative(p) for p in outputs)
        self.manifest[stage] = {
            "stage": stage,
            "inputs_hash": self.inputs_hash(stage),
            "outputs": relative,
            "status": "done",
        }
        self._write_manifest()
        self.update_node(stage, status="done", outputs=relative)

    def mark_failed(self, stage: str, error: BaseException) -> None:
        previous = self.manifest.get(stage, {})
        self.manifest[stage] = {
            "stage": stage,
            "inputs_hash": self.inputs_hash(stage),
            "outputs": previous.get("outputs", []),
            "status": "failed",
            "error": str(error),
        }
        self._write_manifest()
        self.update_node(stage, status="failed")

    def _relative(self, path: Union[str, Path]) -> str:
        path = Path(path)
        if path.is_absolute():
            path = path.resolve()
            if path.is_relative_to(self.run_dir):
                path = path.relative_to(self.run_dir)
        return path.as_posix()

    def __str__(self):
        lines = []
        for stage in self.ordered_stages():
            attrs = self.graph.nodes[stage]
            lines.append(f"{stage}: {attrs['status']} {attrs['inputs_hash'][:12]}")
        return "\n".join(lines)
