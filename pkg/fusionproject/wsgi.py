"""
WSGI entry point serving the solve, certify and path endpoints together with the
OpenAPI schema, e.g. ``gunicorn fusionproject.wsgi``.
"""
import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "fusionproject.settings")

application = get_wsgi_application()
