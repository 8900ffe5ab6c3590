import json
import os

import requests

if __name__ == "__main__":
    url = os.getenv("IDB_LLM_URL", "http://127.0.0.1:8100/v1/complete")

    data = {"prompt": "Please help me generate interactions between two people, such as 'Back-to-back stand'"}

    data = json.dumps(data)

    response = requests.post(url, data=data, headers={"Content-Type": "application/json"}, timeout=120)

    content = json.loads(response.content)

    print(content["text"])
