import sys

import dotenv
import hydra
from omegaconf import DictConfig

# load environment variables from `.env` file if it exists
# recursively searches for `.env` in all folders starting from work dir
dotenv.load_dotenv(override=True)


@hydra.main(config_path="configs/", config_name="run.yaml", version_base="1.3")
def main(config: DictConfig):

    # Imports can be nested inside @hydra.main to optimize tab completion
    # https://github.com/facebookresearch/hydra/issues/934
    from src import utils
    from src.experiment_pipeline import run
    from src.utils.errors import ConfigError, NumericFailure

    log = utils.get_logger(__name__)

    # Applies optional utilities
    utils.extras(config)

    try:
        bundle = run(config)
    except ConfigError as err:
        log.error(f"Invalid configuration: {err}")
        sys.exit(2)
    except NumericFailure as err:
        log.error(f"Numeric failure: {err}")
        sys.exit(3)
    return str(bundle.out_dir)


if __name__ == "__main__":
    main()
