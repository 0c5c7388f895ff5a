import os
import sys
import logging

from hvae_joint import settings
from hvae_joint.cli import main as cli_main

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format=settings.LOG_FORMAT,
    handlers=[logging.StreamHandler()]
)

logger = logging.getLogger('run_experiment')


def main():
    """Run the full phantom protocol with the settings found in the environment / .env."""
    # Ensure we're in the right directory
    project_root = os.path.dirname(os.path.abspath(__file__))
    os.chdir(project_root)

    # Create output directory if it doesn't exist
    out_dir = os.environ.get('HVAE_OUT_DIR', os.path.join(project_root, 'out'))
    os.makedirs(out_dir, exist_ok=True)

    # An experiment.env next to this script is picked up as the plan config
    argv = ['experiment', '--out', out_dir, *sys.argv[1:]]
    plan_file = os.path.join(project_root, 'experiment.env')
    if os.path.exists(plan_file) and '--config' not in argv:
        logger.info(f"Using plan config {plan_file}")
        argv += ['--config', plan_file]

    logger.info("Starting experiment...")
    code = cli_main(argv)
    if code == 0:
        logger.info("Experiment completed")
    else:
        logger.error(f"Experiment failed with exit code {code}")
    sys.exit(code)


if __name__ == "__main__":
    main()
