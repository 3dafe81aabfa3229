import logging
import os
import sys

import toml

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(SCRIPT_DIR)
sys.path.insert(0, os.path.join(PROJECT_ROOT, 'src'))

from app import run_cli  # noqa: E402


def get_config_value(key: str, default=None):
    """Reads a value from the [tool.r2rlab] section of the project's pyproject.toml."""
    toml_path = os.path.join(PROJECT_ROOT, 'pyproject.toml')
    try:
        with open(toml_path, 'r', encoding='utf-8') as f:
            data = toml.load(f)
    except FileNotFoundError:
        logging.error(f"Failed to find pyproject.toml at {toml_path}")
        return default
    except toml.TomlDecodeError as e:
        logging.error(f"pyproject.toml at {toml_path} is not valid TOML: {e}")
        return default
    value = data.get('tool', {}).get('r2rlab', {}).get(key)
    if value is None:
        logging.warning(f"Key '{key}' not found in [tool.r2rlab]; using {default!r}")
        return default
    return value


def reproduction_steps() -> list[list[str]]:
    """Command lines for the ε_max^T sweep, the filter-gain sweep and the noise study."""
    scenario = str(get_config_value('scenario', 'default'))
    common = ['--scenario', scenario,
              '--output-dir', str(get_config_value('output_dir', 'runs')),
              '--seed', str(get_config_value('seed', 0))]
    return [
        ['validate-scenario', '--scenario', scenario],
        ['oracle', *common],
        ['sweep', *common, '--param', 'eps-trunc',
         '--values', str(get_config_value('eps_trunc_values', '0.01,0.05'))],
        ['sweep', *common, '--param', 'filter-gain',
         '--values', str(get_config_value('filter_gain_values', '0.65,0.5,0.35'))],
        ['run', *common, '--algorithm', 'two-step'],
        ['mc', *common, '--algorithms', str(get_config_value('mc_algorithms', 'proposed,ma')),
         '--replicates', str(get_config_value('mc_replicates', 10))],
    ]


if __name__ == '__main__':
    logging.info(f"Reproduction script running from: {SCRIPT_DIR}")
    original_cwd = os.getcwd()
    try:
        os.chdir(PROJECT_ROOT)
        for argv in reproduction_steps():
            logging.info(f"r2rlab {' '.join(argv)}")
            code = run_cli(argv)
            if code != 0:
                logging.error(f"Step '{argv[0]}' exited with code {code}; aborting.")
                sys.exit(code)
        logging.info("All reproduction steps finished.")
    finally:
        os.chdir(original_cwd)
