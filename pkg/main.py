import logging

from dotenv import load_dotenv
from flask import Flask
from flask.cli import FlaskGroup

from core.shared import get_settings

# Import Blueprints
from commands.train import train_bp
from commands.experiments import experiments_bp

load_dotenv()


def create_app():
    app = Flask(__name__)
    settings = get_settings()
    app.config['OUT_DIR'] = settings['out_dir']
    app.config['MNIST_DIR'] = settings['mnist_dir']
    app.config['LOG_LEVEL'] = settings['log_level']

    logging.basicConfig(level=getattr(logging, app.config['LOG_LEVEL'], logging.INFO),
                        format='%(levelname)s %(name)s: %(message)s')
    if app.config['MNIST_DIR']:
        print(f"ℹ️  MNIST directory configured: {app.config['MNIST_DIR']}")

    # Register Blueprints (each contributes CLI commands)
    app.register_blueprint(train_bp)
    app.register_blueprint(experiments_bp)
    return app


app = create_app()
cli = FlaskGroup(create_app=lambda: app)

if __name__ == '__main__':
    cli()
