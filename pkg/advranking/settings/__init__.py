"""Django settings for the advranking project.

The configuration is read from various ADVRANK_* environment variables,
usually collected in an environment file loaded by manage.py.
The provided defaults are geared towards desk-scale MNIST experiments.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/3.2/ref/settings/
"""

import logging
from pathlib import Path

from . import env_util as env

logging.basicConfig(
    level=logging.INFO, format="[%(asctime)s][%(name)s][%(levelname)s] %(message)s"
)
logger = logging.getLogger(__name__)


# Build paths inside the project like this: BASE_DIR / "subdir" / ...
BASE_DIR = env.load_path(envvar="ADVRANK_BASE_DIR", default=Path(__file__).parents[2])

# Priority: ADVRANK_SECRET_KEY, ADVRANK_SECRET_KEY_FILE, random string for each invocation
SECRET_KEY = env.load_secret_key(
    envvar="ADVRANK_SECRET_KEY", keyfile=env.load_path(envvar="ADVRANK_SECRET_KEY_FILE")
)

DEBUG = env.load_boolean("ADVRANK_DEBUG", default=False)

# Database (result ledger)
# https://docs.djangoproject.com/en/3.2/ref/settings/#databases
DATABASES = {
    "default": env.load_database_url(
        "ADVRANK_DATABASE_URL",
        default="sqlite:///{!s}".format(BASE_DIR / "data" / "db.sqlite3"),
    )
}
for db, conf in DATABASES.items():
    logger.info(
        "Using database %(db)s: %(host)s/%(name)s",
        {"db": db, "host": conf.get("HOST", ""), "name": conf.get("NAME")},
    )

DEFAULT_AUTO_FIELD = "django.db.models.AutoField"

# Datasets, checkpoints and reports
DATA_DIR = env.load_path("ADVRANK_DATA_DIR", default=BASE_DIR / "data" / "mnist")
DATASET = env.load_string("ADVRANK_DATASET", default="mnist")
CHECKPOINT_DIR = env.load_path(
    "ADVRANK_CHECKPOINT_DIR", default=BASE_DIR / "data" / "checkpoints"
)
RESULTS_DIR = env.load_path("ADVRANK_RESULTS_DIR", default=BASE_DIR / "data" / "results")

# Experiment defaults; command line options take precedence
SEED = env.load_integer("ADVRANK_SEED", default=0)
CORPUS_SIZE = env.load_integer("ADVRANK_CORPUS_SIZE", default=2000)
TRIALS = env.load_integer("ADVRANK_TRIALS", default=200)
JOBS = env.load_integer("ADVRANK_JOBS", default=1)
EPSILON_GRID = env.load_number_sequence(
    "ADVRANK_EPSILON_GRID", cast=float, default=(0.01, 0.03, 0.1, 0.3)
)
WM_GRID = env.load_number_sequence("ADVRANK_WM_GRID", cast=int, default=(1, 2, 5, 10))
XI_GRID = env.load_number_sequence(
    "ADVRANK_XI_GRID", cast=float, default=(0.0, 1.0, 100.0, 10000.0)
)
# 0 means the full corpus
POOL_SIZE = env.load_integer("ADVRANK_POOL_SIZE", default=256)
SP_GROUP = env.load_integer("ADVRANK_SP_GROUP", default=5)
XI_QA_PLUS = env.load_float("ADVRANK_XI_QA_PLUS", default=1.0)
XI_QA_MINUS = env.load_float("ADVRANK_XI_QA_MINUS", default=100.0)
DEFENSE_EPSILON = env.load_float("ADVRANK_DEFENSE_EPSILON", default=0.3)

# Ensure that all specified directories exist
for path in [BASE_DIR / "data", CHECKPOINT_DIR, RESULTS_DIR]:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except PermissionError as error:
        logger.warning("Cannot ensure directory: %s (%s)", path, error)

# Application definition

INSTALLED_APPS = [
    "advranking",
    "advranking.experiments",
]

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "handlers": {
        "console": {"level": "DEBUG", "class": "logging.StreamHandler"},
    },
    "loggers": {
        "": {
            "handlers": ["console"],
            "level": DEBUG and "DEBUG" or "INFO",
            "propagate": True,
        },
    },
}

USE_I18N = False

USE_TZ = True

TIME_ZONE = "UTC"
