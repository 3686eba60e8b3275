import json
import os
import shutil
from pathlib import Path

import pytest

from czsl import cli

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.yaml"

# criterion id -> (passed, detail); filled by the acceptance tests
VERDICTS: dict[int, tuple[bool, str]] = {}


class DeskRun:
    """Lazily executes full ``cmd_run`` pipelines on the default benchmark."""

    def __init__(self, root: Path):
        self.root = root
        self.data = root / "data"
        self._records: dict[str, dict] = {}
        cfg = self.config("ours")
        cli.cmd_generate(cfg)
        self.dataset = cli.load_dataset(cfg)
        self.backbone = cli.cmd_pretrain(cfg, self.dataset)

    def config(self, name: str, *extra: str) -> dict:
        over = [f"dataset.dir={self.data}", f"output.dir={self.root / name}"]
        episodes = os.environ.get("CZSL_ACCEPTANCE_EPISODES")
        if episodes:
            over.append(f"training.max_episodes={int(episodes)}")
        return cli.load_config(DEFAULT_CONFIG, over + list(extra))

    def run(self, name: str, *extra: str) -> dict:
        if name not in self._records:
            cfg = self.config(name, *extra)
            out = Path(cfg["output"]["dir"])
            out.mkdir(parents=True, exist_ok=True)
            # every variant shares the pretrained backbone of the first run
            for f in ("backbone.params", "backbone.json"):
                src = self.root / "ours" / f
                if name != "ours" and src.exists():
                    shutil.copy(src, out / f)
            cli.cmd_run(cfg)
            recs = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines()]
            self._records[name] = recs[0]
        return self._records[name]

    def out(self, name: str) -> Path:
        return self.root / name


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRun(tmp_path_factory.mktemp("desk"))


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str = "") -> bool:
        VERDICTS[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
