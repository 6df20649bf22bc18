"""
Standard driver corpus

Every entry is a validated driver spec with a fixed seed, so the corpus is
byte-identical across runs on the same grid.
"""
import logging
from typing import Any, Dict, List, Optional

from pydantic import TypeAdapter

from app.models import DriverPath, TimeGrid
from app.schemas import DriverSpec
from app.services.driver_service import driver_service
from app.services.file_service import ArtifactSink, render_csv, render_json
from app.utils.hashing import corpus_hash
from app.utils.validators import InputValidator

logger = logging.getLogger(__name__)

CORPUS_SEED = 7

_spec_adapter = TypeAdapter(DriverSpec)


def _fe(*steps) -> Dict[str, Any]:
    return {"kind": "finite_energy", "hdot_steps": [list(s) for s in steps]}


def _stochastic(**fields) -> Dict[str, Any]:
    return {"seed": CORPUS_SEED, **fields}


CORPUS_RAW: Dict[str, Dict[str, Any]] = {
    "zero": _fe((0.0, 0.0)),
    "linear_0p5": _fe((0.0, 0.5)),
    "linear_1": _fe((0.0, 1.0)),
    "linear_2": _fe((0.0, 2.0)),
    "linear_4": _fe((0.0, 4.0)),
    "piecewise_slope": _fe((0.0, 1.0), (0.5, -2.0)),
    # ½-Hölder norm above 4 on [½, 1]; exercises the cone gate and the piece split
    "steep_tail": _fe((0.0, 0.0), (0.5, 12.0)),
    "brownian_k0p33": _stochastic(kind="brownian", kappa=1.0 / 3.0),
    "brownian_k1": _stochastic(kind="brownian", kappa=1.0),
    "brownian_k1p9": _stochastic(kind="brownian", kappa=1.9),
    "step_kappa": _stochastic(kind="variable_kappa", kappa_steps=[[0.0, 1.0], [0.5, 1.9]]),
    "ou_lambda1": _stochastic(kind="ou", **{"lambda": 1.0}),
    "h_perturbed": _stochastic(kind="h_perturbed", inner={"kind": "brownian", "kappa": 1.0},
                               h=_fe((0.0, 1.0))),
    "tpow_half_b": _stochastic(kind="functional", F="t_pow_p", p=0.5),
    "tpow_1_b": _stochastic(kind="functional", F="t_pow_p", p=1.0),
    "t_log1p_b2": _stochastic(kind="functional", F="t_log1p_x2"),
}

LINEAR_FAMILY = {"zero": 0.0, "linear_0p5": 0.5, "linear_1": 1.0, "linear_2": 2.0, "linear_4": 4.0}


class CorpusError(Exception):
    """Custom exception for corpus errors"""
    pass


def corpus_specs(names: Optional[List[str]] = None) -> Dict[str, Any]:
    """Validated specs, in corpus order"""
    wanted = list(CORPUS_RAW) if names is None else names
    specs = {}
    for name in wanted:
        if name not in CORPUS_RAW:
            raise CorpusError(f"unknown corpus entry: {name}")
        specs[name] = _spec_adapter.validate_python(CORPUS_RAW[name])
    return specs


def finite_energy_names() -> List[str]:
    return [name for name, raw in CORPUS_RAW.items() if raw["kind"] == "finite_energy"]


def driver_csv(path: DriverPath) -> str:
    return render_csv(["t", "u"], zip(path.times, path.values))


def build_corpus(grid: TimeGrid, names: Optional[List[str]] = None) -> Dict[str, DriverPath]:
    paths = {}
    for name, spec in corpus_specs(names).items():
        paths[name] = driver_service.sample_driver(spec, grid)
    return paths


def content_hash(paths: Dict[str, DriverPath]) -> str:
    """git-style hash over the `t,u` files of a set of drivers"""
    return corpus_hash({f"{name}.csv": driver_csv(path).encode("utf-8") for name, path in paths.items()})


def write_corpus(sink: ArtifactSink, grid: TimeGrid) -> List[str]:
    """Write `<name>.csv` per entry plus `corpus.json` with the specs and content hash"""
    paths = build_corpus(grid)
    files = []
    for name, path in paths.items():
        if not InputValidator.validate_name(name):
            raise CorpusError(f"corpus name is not file-system safe: {name}")
        files.append(str(sink.write_text(f"{name}.csv", driver_csv(path))))
    index = {
        "grid": grid.to_dict(),
        "entries": {name: CORPUS_RAW[name] for name in paths},
        "corpus_hash": content_hash(paths),
    }
    files.append(str(sink.write_text("corpus.json", render_json(index))))
    logger.info(f"Wrote corpus of {len(paths)} drivers to {sink.out_dir}")
    return files
