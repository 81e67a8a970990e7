import sys

import dotenv
import hydra
from omegaconf import DictConfig

# load environment variables from `.env` file if it exists
# recursively searches for `.env` in all folders starting from work dir
dotenv.load_dotenv(override=True)


@hydra.main(config_path="configs/", config_name="train.yaml", version_base="1.3")
def main(config: DictConfig):

    # Imports can be nested inside @hydra.main to optimize tab completion
    # https://github.com/facebookresearch/hydra/issues/934
    from src import utils
    from src.training_pipeline import train
    from src.utils.errors import ConfigError, NumericFailure

    # Applies optional utilities
    utils.extras(config)

    # Train model
    try:
        return train(config)
    except ConfigError as err:
        utils.get_logger(__name__).error(f"Invalid configuration: {err}")
        sys.exit(2)
    except NumericFailure as err:
        utils.get_logger(__name__).error(f"Training diverged: {err}")
        sys.exit(3)


if __name__ == "__main__":
    main()
