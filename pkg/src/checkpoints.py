import json
import logging
import os
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


class CheckpointStore:
    """Per-stage completion records under <out_dir>/checkpoints/state.json."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "checkpoints", "state.json")
        self.state: Dict[str, Dict] = {"stages": {}}
        self._load()

    def _load(self):
        if os.path.exists(self.path):
            try:
                with open(self.path, "r") as f:
                    data = json.load(f)
                if isinstance(data.get("stages"), dict):
                    self.state.update(data)
            except (OSError, ValueError) as e:
                # unreadable state means nothing can be resumed
                logger.warning("ignoring unreadable checkpoint state %s: %s", self.path, e)

    def save(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.state, f, indent=2, sort_keys=True)
        os.replace(tmp, self.path)

    def artifact(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def is_done(self, stage: str, cfg_hash: str) -> bool:
        rec = self.state["stages"].get(stage)
        if not rec or rec.get("status") != "done" or rec.get("config_hash") != cfg_hash:
            return False
        return all(os.path.exists(self.artifact(a)) for a in rec.get("artifacts", []))

    def mark_done(self, stage: str, seed: int, cfg_hash: str, artifacts: List[str]):
        self.state["stages"][stage] = {"status": "done", "seed": seed, "config_hash": cfg_hash,
                                       "artifacts": sorted(artifacts)}
        self.save()

    def mark_failed(self, stage: str, seed: int, cfg_hash: str, message: str):
        self.state["stages"][stage] = {"status": "failed", "seed": seed, "config_hash": cfg_hash,
                                       "error": message, "artifacts": []}
        self.save()

    def record(self, stage: str) -> Optional[Dict]:
        return self.state["stages"].get(stage)

    def reset(self, stage: Optional[str] = None):
        if stage is None:
            self.state["stages"] = {}
        else:
            self.state["stages"].pop(stage, None)
        self.save()
