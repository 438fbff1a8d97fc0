
from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='fusionfl-local-development-key')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = config(
    'ALLOWED_HOSTS',
    default='localhost,127.0.0.1,testserver',
    cast=lambda value: [host.strip() for host in value.split(',') if host.strip()],
)


# Application definition

INSTALLED_APPS = [
    "django.contrib.auth",
    "django.contrib.contenttypes",

    # third-party apps
    # API
    "rest_framework",
    # api documentation
    "drf_spectacular",

    # custom apps
    # local cost functions
    "losses.apps.LossesConfig",
    # objective formulations and conventions
    "problem.apps.ProblemConfig",
    # serial reference solvers
    "oracle.apps.OracleAppConfig",
    # federated protocol simulation
    "pdmm.apps.PdmmAppConfig",
    # recovery certificates
    "theory.apps.TheoryConfig",
    # partitions and solution paths
    "clustering.apps.ClusteringConfig",
    # synthetic benchmark
    "datagen.apps.DatagenConfig",
    # experiment runner and commands
    "experiments.apps.ExperimentsConfig",
]

MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.middleware.common.CommonMiddleware",
]

ROOT_URLCONF = "fusionproject.urls"

TEMPLATES = [
    {
        "BACKEND": "django.template.backends.django.DjangoTemplates",
        "DIRS": [],
        "APP_DIRS": True,
        "OPTIONS": {
            "context_processors": [
                "django.template.context_processors.debug",
                "django.template.context_processors.request",
            ],
        },
    },
]

WSGI_APPLICATION = "fusionproject.wsgi.application"


# Database
# Nothing is persisted; an in-memory database keeps Django's checks satisfied.

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": ":memory:",
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.1/topics/i18n/

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# REST FRAMEWORK CONFIGURATIONS
REST_FRAMEWORK = {

    'DEFAULT_AUTHENTICATION_CLASSES': [],

    'DEFAULT_PERMISSION_CLASSES': [
        'rest_framework.permissions.AllowAny',
    ],

    'UNAUTHENTICATED_USER': None,

    'DEFAULT_SCHEMA_CLASS': 'drf_spectacular.openapi.AutoSchema',

}


# drf-spectacular settings
SPECTACULAR_SETTINGS = {
    'TITLE': 'FusionFL API',
    'DESCRIPTION': 'Sum-of-norms personalized federated learning: reference solvers, '
                   'recovery certificates and solution paths',
    'VERSION': '1.0.0',
    'SERVE_INCLUDE_SCHEMA': False,
    'SWAGGER_UI_SETTINGS': {
        'deepLinking': True,
        'defaultModelRendering': 'model',
        'defaultModelsExpandDepth': 2,
    },
}


# SOLVER AND EXPERIMENT DEFAULTS
FUSION = {
    'SCHEMA_VERSION': 1,
    'OUTPUT_DIR': config('FUSION_OUTPUT_DIR', default=str(BASE_DIR / 'results')),
    'WORKERS': config('FUSION_WORKERS', default=1, cast=int),
    'ORACLE': {
        'method': 'serial_admm',
        'schedule': 'gauss_seidel',
        'rho': 1.0,
        'tol': 1e-7,
        'max_iters': 20000,
        'inner_tol': 1e-10,
        'inner_max_iters': 100,
        'seed': 0,
    },
    # parameters of the convergence experiment: rho = eta = 10, tau = 4/5, nu = 1/5
    'PDMM': {
        'rho': 10.0,
        'eta_x': 10.0,
        'eta_z': 10.0,
        'tau': 0.8,
        'nu': 0.2,
        'activation': 0.4,
        'max_iters': 1000,
        'inner_tol': 1e-10,
        'inner_max_iters': 200,
        'seed': 0,
        'x_surrogate': 'paired',
    },
    'PATH': {
        'growth_c': 2.0,
        'max_steps': 60,
    },
    'SUBLEVEL': {
        'n_samples': 10000,
        'batch_size': 4096,
    },
    'EXPERIMENT': {
        # the grid spans the sum-ordered personalization band up to consensus
        'convention': 'sum-ordered',
        'reg_c': 1e-3,
        'grid_min': 1e-3,
        'grid_max': 1e3,
        'grid_points': 30,
        'seeds': [0, 1, 2, 3, 4],
        'distinct_tol': 1e-8,
    },
}


# LOGGING CONFIGURATIONS

FUSION_LOG_LEVEL = config('FUSION_LOG_LEVEL', default='INFO')
FUSION_LOG_FILE = config('FUSION_LOG_FILE', default='')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': True,
        },
    },
}

for _app in ('losses', 'problem', 'oracle', 'pdmm', 'theory', 'clustering', 'datagen', 'experiments'):
    LOGGING['loggers'][_app] = {
        'handlers': ['console'],
        'level': FUSION_LOG_LEVEL,
        'propagate': False,
    }

if FUSION_LOG_FILE:
    LOGGING['handlers']['file'] = {
        'level': 'DEBUG',
        'class': 'logging.FileHandler',
        'filename': FUSION_LOG_FILE,
        'formatter': 'verbose',
    }
    for _logger in LOGGING['loggers'].values():
        _logger['handlers'].append('file')
