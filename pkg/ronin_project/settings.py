from pathlib import Path
from decouple import config, Csv

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='django-insecure-restoration-pipeline-local-key')
DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',

    # Third party
    'rest_framework',

    # Local apps
    'degrade',
    'grounding',
    'restoration',
    'training',
    'evaluation',
    'pipeline',
]

# Artifacts are plain files; no tables are used.
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Restoration pipeline
RONIN = {
    'SEED': config('RONIN_SEED', default=0, cast=int),
    'EMBEDDING_DIM': config('RONIN_EMBEDDING_DIM', default=384, cast=int),
    'CANDIDATE_DEGRADATIONS': config(
        'RONIN_CANDIDATES', default='noise,rain,snow,blur,compression', cast=Csv()
    ),
    'GROUNDING_MAX_IN_FLIGHT': config('RONIN_GROUNDING_MAX_IN_FLIGHT', default=4, cast=int),
    'CLIENT_TIMEOUT': config('RONIN_CLIENT_TIMEOUT', default=30.0, cast=float),
    'CLIENT_RETRIES': config('RONIN_CLIENT_RETRIES', default=2, cast=int),
    'STORE_FLUSH_EVERY': 64,
    'VIDEO_ENCODER': config('RONIN_VIDEO_ENCODER', default='ffmpeg'),
    'VIDEO_COMPRESSION_FALLBACK': config('RONIN_VIDEO_FALLBACK', default=True, cast=bool),
    'VIDEO_FALLBACK_QUALITY': 30,
    'SNOW_PROFILES': {
        'moderate': {
            'density': 1.5e-3,
            'radius': (0.6, 1.6),
            'opacity': (0.5, 0.9),
            'streak': 1.5,
            'fall_speed': 1.5,
        },
        'severe': {
            'density': 6e-3,
            'radius': (0.6, 1.6),
            'opacity': (0.5, 0.9),
            'streak': 2.5,
            'fall_speed': 2.5,
        },
    },
    'RAIN_PROFILES': {
        'moderate': {'density': 4e-3, 'length': 9, 'opacity': 0.35, 'fall_speed': 4.0},
        'severe': {'density': 1e-2, 'length': 15, 'opacity': 0.5, 'fall_speed': 6.0},
    },
    'CHECKPOINT_EVERY': config('RONIN_CHECKPOINT_EVERY', default=100, cast=int),
    'LOG_EVERY': config('RONIN_LOG_EVERY', default=50, cast=int),
    'PSNR_CAP': 100.0,
}

# Celery Configuration
CELERY_BROKER_URL = config('REDIS_URL', default='redis://localhost:6379/0')
CELERY_RESULT_BACKEND = config('REDIS_URL', default='redis://localhost:6379/0')
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
# Offline by default: tasks run inline unless a worker deployment turns this off.
CELERY_TASK_ALWAYS_EAGER = config('CELERY_TASK_ALWAYS_EAGER', default=True, cast=bool)
CELERY_TASK_EAGER_PROPAGATES = True

LOG_LEVEL = config('LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'pipeline': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'pipeline',
        },
    },
    'loggers': {
        app: {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False}
        for app in ('degrade', 'grounding', 'restoration', 'training', 'evaluation', 'pipeline')
    },
}
