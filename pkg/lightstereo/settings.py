"""
Django settings for the lightstereo project.

The project hosts a single app, ``stereo``, which exposes the stereo engine
through management commands (``python manage.py infer``, ``analyze`` ...).
There is no web surface and no database.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""
import os
from pathlib import Path

import environ

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Initialize environment variables
env = environ.Env(
    DEBUG=(bool, False),
    LIGHTSTEREO_THREADS=(int, os.cpu_count() or 1),
    LIGHTSTEREO_LOG_LEVEL=(str, 'INFO'),
    LIGHTSTEREO_VARIANT=(str, 'M'),
    LIGHTSTEREO_MAX_DISPARITY=(int, 192),
    LIGHTSTEREO_SEED=(int, 0),
    LIGHTSTEREO_SLOW_TESTS=(bool, False),
)

# Read .env file if it exists (for local development)
env_file = os.path.join(BASE_DIR, '.env')
if os.path.exists(env_file):
    environ.Env.read_env(env_file)

# Only used by Django internals; nothing here is signed.
SECRET_KEY = env('SECRET_KEY', default='lightstereo-local-only')

DEBUG = env('DEBUG')

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'stereo',
]

DATABASES = {}

# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

# Stereo engine

LIGHTSTEREO_THREADS = env('LIGHTSTEREO_THREADS')
LIGHTSTEREO_LOG_LEVEL = env('LIGHTSTEREO_LOG_LEVEL').upper()
LIGHTSTEREO_VARIANT = env('LIGHTSTEREO_VARIANT').upper()
LIGHTSTEREO_MAX_DISPARITY = env('LIGHTSTEREO_MAX_DISPARITY')
LIGHTSTEREO_SEED = env('LIGHTSTEREO_SEED')

# Gates the toy training acceptance run in the test suite (minutes of CPU).
LIGHTSTEREO_SLOW_TESTS = env('LIGHTSTEREO_SLOW_TESTS')

# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'stereo': {
            'handlers': ['console'],
            'level': LIGHTSTEREO_LOG_LEVEL,
            'propagate': False,
        },
    },
}
