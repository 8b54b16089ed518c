import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'replisim.settings')
django.setup()
