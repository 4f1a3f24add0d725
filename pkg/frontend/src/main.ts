import { ConsoleStore } from "./store.js";
import { mountConsole } from "./render.js";

// Browser bootstrap: pick an identity by pasting its bearer token (the
// gateway prints the scenario's tokens on startup), then mount the console.

function loginForm(root: HTMLElement): void {
  const form = document.createElement("form");
  form.id = "login-form";
  form.innerHTML = `
    <h1>federation operator console</h1>
    <p>paste an actor token from the scenario (for example <code>tok-dso</code>)</p>
    <input name="token" placeholder="bearer token" />
    <button type="submit">sign in</button>
    <p class="error" id="login-error"></p>
  `;
  form.addEventListener("submit", async (event) => {
    event.preventDefault();
    const token = (form.querySelector("[name=token]") as HTMLInputElement).value.trim();
    const store = new ConsoleStore("", token);
    try {
      await store.login();
    } catch {
      (form.querySelector("#login-error") as HTMLElement).textContent =
        "token rejected by the gateway";
      return;
    }
    root.replaceChildren();
    mountConsole(root, store);
    store.startFeed();
  });
  root.replaceChildren(form);
}

const root = document.getElementById("app");
if (root) {
  loginForm(root);
}
