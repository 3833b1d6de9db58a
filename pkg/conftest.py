import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'ronin_project.settings')
django.setup()
