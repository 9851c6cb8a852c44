import logging

from django.apps import AppConfig
from django.conf import settings

logger = logging.getLogger(__name__)


class StereoConfig(AppConfig):
    name = 'stereo'
    verbose_name = 'LightStereo engine'

    def ready(self):
        from .tensor_ops import set_num_threads

        set_num_threads(settings.LIGHTSTEREO_THREADS)
        logger.debug('kernel threads: %d', settings.LIGHTSTEREO_THREADS)
