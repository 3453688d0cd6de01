import { StudioClient } from "./api.js";
import { App } from "./app.js";

const root = document.getElementById("app");
if (root) {
  // same-origin: the service serves these assets next to its API
  void new App(new StudioClient(""), root).boot();
}
