import os
import logging
import tempfile
from dataclasses import dataclass, field, fields, replace

import toml

from controllers.dynamics import InputConditions, ModelParameters, PlantParameters
from controllers.rto import OptimizationSpec

SCHEMA_VERSION = 1
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
SCENARIO_DIR = os.path.join(PROJECT_ROOT, 'resources', 'scenarios')


class ScenarioError(ValueError):
    """Scenario file problem; `field` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: PlantParameters
    model: ModelParameters
    inputs: InputConditions           # u_init = (S0, F) plus the fixed X0, P0, V0, t_f
    spec: OptimizationSpec
    theta_bounds: tuple               # ((K_X lo, K_I lo), (K_X hi, K_I hi))
    grid_step: float = 0.1            # h
    sample_step: float = 10.0         # h
    noise_sigma_rel: float = 0.02     # default for noise studies; single runs are noise-free
    calibration: dict = field(default_factory=dict, compare=False)

    @property
    def u_init(self):
        return self.inputs.decision

    def with_plant(self, **changes) -> "Scenario":
        return replace(self, plant=replace(self.plant, **changes))

    def with_horizon(self, t_f: float | None = None, V_max: float | None = None) -> "Scenario":
        scenario = self
        if t_f is not None:
            scenario = replace(scenario, inputs=replace(scenario.inputs, t_f=float(t_f)))
        if V_max is not None:
            scenario = replace(scenario, spec=replace(scenario.spec, V_max=float(V_max)))
        return scenario

    def to_dict(self) -> dict:
        data = {
            'schema_version': SCHEMA_VERSION,
            'name': self.name,
            'plant': self.plant.to_dict(),
            'model': {
                'theta': list(self.model.theta),
                'theta_lower': list(self.theta_bounds[0]),
                'theta_upper': list(self.theta_bounds[1]),
            },
            'inputs': self.inputs.to_dict(),
            'optimization': self.spec.to_dict(),
            'sampling': {
                'grid_step': self.grid_step,
                'sample_step': self.sample_step,
                'noise_sigma_rel': self.noise_sigma_rel,
            },
        }
        if self.calibration:
            data['calibration'] = dict(self.calibration)
        return data


def _section(data: dict, name: str, keys: set, optional: set = frozenset()) -> dict:
    if name not in data:
        raise ScenarioError(name, "section is missing")
    section = data[name]
    if not isinstance(section, dict):
        raise ScenarioError(name, "must be a table")
    unknown = sorted(set(section) - keys - optional)
    if unknown:
        raise ScenarioError(f"{name}.{unknown[0]}", "unknown key")
    missing = sorted(keys - set(section))
    if missing:
        raise ScenarioError(f"{name}.{missing[0]}", "required key is missing")
    return section


def _number(section: dict, path: str, key: str) -> float:
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{path}.{key}", f"must be a number, got {value!r}")
    return float(value)


def _pair(section: dict, path: str, key: str) -> tuple[float, float]:
    value = section[key]
    if not isinstance(value, list) or len(value) != 2:
        raise ScenarioError(f"{path}.{key}", f"must be a two-element array, got {value!r}")
    return tuple(_number({key: v}, path, key) for v in value)


def scenario_from_dict(data: dict) -> Scenario:
    """Builds and validates a Scenario; every failure names the dotted field."""
    top = {'schema_version', 'name', 'plant', 'model', 'inputs', 'optimization', 'sampling'}
    unknown = sorted(set(data) - top - {'calibration'})
    if unknown:
        raise ScenarioError(unknown[0], "unknown key")
    if data.get('schema_version') != SCHEMA_VERSION:
        raise ScenarioError('schema_version', f"expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    if not isinstance(data.get('name'), str) or not data['name']:
        raise ScenarioError('name', "must be a non-empty string")

    plant_keys = {f.name for f in fields(PlantParameters)}
    section = _section(data, 'plant', plant_keys)
    values = {k: _number(section, 'plant', k) for k in plant_keys}
    try:
        plant = PlantParameters(**values)
    except ValueError as e:
        raise ScenarioError('plant', str(e)) from e

    section = _section(data, 'model', {'theta', 'theta_lower', 'theta_upper'})
    theta = _pair(section, 'model', 'theta')
    lower = _pair(section, 'model', 'theta_lower')
    upper = _pair(section, 'model', 'theta_upper')
    try:
        model = ModelParameters(theta=theta, fixed=plant)
    except ValueError as e:
        raise ScenarioError('model.theta', str(e)) from e
    if not all(0 < lo < hi for lo, hi in zip(lower, upper)):
        raise ScenarioError('model.theta_lower', "bounds must satisfy 0 < lower < upper")
    if not all(lo <= t <= hi for lo, t, hi in zip(lower, theta, upper)):
        raise ScenarioError('model.theta', "nominal theta must lie inside its bounds")

    input_keys = {f.name for f in fields(InputConditions)}
    section = _section(data, 'inputs', input_keys)
    values = {k: _number(section, 'inputs', k) for k in input_keys}
    try:
        inputs = InputConditions(**values)
    except ValueError as e:
        raise ScenarioError('inputs', str(e)) from e

    section = _section(data, 'optimization', {'V_max', 'S0_bounds', 'F_bounds'})
    V_max = _number(section, 'optimization', 'V_max')
    S0_bounds = _pair(section, 'optimization', 'S0_bounds')
    F_bounds = _pair(section, 'optimization', 'F_bounds')
    try:
        spec = OptimizationSpec(V_max=V_max, S0_bounds=S0_bounds, F_bounds=F_bounds)
    except ValueError as e:
        raise ScenarioError('optimization', str(e)) from e
    if spec.V_max <= inputs.V0:
        raise ScenarioError('optimization.V_max', f"must exceed inputs.V0 = {inputs.V0} L")
    if not spec.contains(inputs.decision):
        raise ScenarioError('inputs.S0', "initial (S0, F) must lie inside the decision bounds")

    section = _section(data, 'sampling', {'grid_step', 'sample_step', 'noise_sigma_rel'})
    grid_step = _number(section, 'sampling', 'grid_step')
    sample_step = _number(section, 'sampling', 'sample_step')
    noise = _number(section, 'sampling', 'noise_sigma_rel')
    if grid_step <= 0:
        raise ScenarioError('sampling.grid_step', "must be > 0")
    ratio = sample_step / grid_step
    if sample_step <= 0 or abs(ratio - round(ratio)) > 1e-9:
        raise ScenarioError('sampling.sample_step', f"must be a positive multiple of grid_step = {grid_step}")
    ratio = inputs.t_f / grid_step
    if abs(ratio - round(ratio)) > 1e-9:
        raise ScenarioError('inputs.t_f', f"must be a multiple of sampling.grid_step = {grid_step}")
    if noise < 0:
        raise ScenarioError('sampling.noise_sigma_rel', "must be >= 0")

    calibration = data.get('calibration', {})
    if not isinstance(calibration, dict):
        raise ScenarioError('calibration', "must be a table")

    return Scenario(name=data['name'], plant=plant, model=model, inputs=inputs, spec=spec,
                    theta_bounds=(lower, upper), grid_step=grid_step, sample_step=sample_step,
                    noise_sigma_rel=noise, calibration=calibration)


def loads_scenario(text: str) -> Scenario:
    try:
        data = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ScenarioError('<file>', f"not valid TOML: {e}") from e
    return scenario_from_dict(data)


def dumps_scenario(scenario: Scenario) -> str:
    return toml.dumps(scenario.to_dict())


def write_atomic(path: str, text: str):
    """Writes to a temp file in the target directory, then renames over path."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


class ScenarioManager:
    def __init__(self, scenario_dir: str | None = None, output_root: str = 'runs'):
        self.scenario_dir = scenario_dir or SCENARIO_DIR
        self.output_root = output_root

    def resolve(self, name_or_path: str) -> str:
        """A path to an existing file wins; otherwise <scenario_dir>/<name>.toml."""
        if os.path.isfile(name_or_path):
            return name_or_path
        candidate = os.path.join(self.scenario_dir, f"{name_or_path}.toml")
        if os.path.isfile(candidate):
            return candidate
        available = ", ".join(self.list_scenarios()) or "none"
        raise ScenarioError('scenario', f"'{name_or_path}' is neither a file nor a known scenario "
                                        f"(available: {available})")

    def list_scenarios(self) -> list[str]:
        if not os.path.isdir(self.scenario_dir):
            return []
        return sorted(f[:-5] for f in os.listdir(self.scenario_dir) if f.endswith('.toml'))

    def load(self, name_or_path: str) -> Scenario:
        path = self.resolve(name_or_path)
        with open(path, 'r', encoding='utf-8') as f:
            scenario = loads_scenario(f.read())
        logging.info(f"Loaded scenario '{scenario.name}' from {path}")
        return scenario

    def save(self, scenario: Scenario, path: str | None = None) -> str:
        path = path or os.path.join(self.scenario_dir, f"{scenario.name}.toml")
        write_atomic(path, dumps_scenario(scenario))
        logging.info(f"Scenario '{scenario.name}' written to {path}")
        return path

    def run_dir(self, scenario_name: str, algorithm: str, seed: int, suffix: str | None = None) -> str:
        """<scenario>_<algorithm>_<seed>, with _<suffix> appended for sweep points."""
        name = f"{scenario_name}_{algorithm}_{seed}" + (f"_{suffix}" if suffix else "")
        path = os.path.join(self.output_root, name)
        os.makedirs(path, exist_ok=True)
        return path

    def write(self, directory: str, filename: str, text: str) -> str:
        path = os.path.join(directory, filename)
        write_atomic(path, text)
        logging.debug(f"Wrote {path}")
        return path
