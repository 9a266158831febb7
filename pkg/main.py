import logging
import sys

from experiment.app import ExperimentCLI


def main():
    # Set up logging
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=logging.INFO
    )

    # Initialize and run the command-line interface
    try:
        cli = ExperimentCLI()
        status = cli.run()
    except Exception as e:
        logging.error(f"Error running experiment: {e}")
        raise
    sys.exit(status)

if __name__ == "__main__":
    main()
