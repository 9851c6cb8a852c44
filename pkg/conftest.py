"""Configure Django so pytest can collect the stereo test modules."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'lightstereo.settings')
django.setup()
