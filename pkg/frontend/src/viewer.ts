/** WebGL2 mesh viewer: orbit camera, flat/smooth shading toggle.
 *
 * Positions and smooth normals are re-uploaded when the blend changes; flat
 * shading is derived in the fragment shader from screen-space derivatives,
 * so the toggle costs one uniform.
 */

import { Mat4, lookAt, multiply, orbitEye, perspective, vertexNormals } from "./math3d.js";

const VS = `#version 300 es
in vec3 position;
in vec3 normal;
uniform mat4 mvp;
out vec3 vNormal;
out vec3 vPos;
void main() {
  vNormal = normal;
  vPos = position;
  gl_Position = mvp * vec4(position, 1.0);
}`;

const FS = `#version 300 es
precision highp float;
in vec3 vNormal;
in vec3 vPos;
uniform float uFlat;
uniform vec3 uEye;
out vec4 color;
void main() {
  vec3 n = normalize(vNormal);
  if (uFlat > 0.5) {
    n = normalize(cross(dFdx(vPos), dFdy(vPos)));
  }
  vec3 l = normalize(vec3(0.4, 0.5, 0.8));
  vec3 v = normalize(uEye - vPos);
  if (dot(n, v) < 0.0) n = -n;
  float diff = max(dot(n, l), 0.0);
  vec3 base = vec3(0.62, 0.66, 0.72);
  vec3 c = base * (0.25 + 0.7 * diff);
  color = vec4(c, 1.0);
}`;

export class Viewer {
  private gl: WebGL2RenderingContext;
  private program: WebGLProgram;
  private vao: WebGLVertexArrayObject;
  private posBuf: WebGLBuffer;
  private nrmBuf: WebGLBuffer;
  private idxBuf: WebGLBuffer;
  private nIndices = 0;
  private normals: Float32Array = new Float32Array(0);
  private faces: Uint32Array = new Uint32Array(0);
  private uMvp: WebGLUniformLocation;
  private uFlat: WebGLUniformLocation;
  private uEye: WebGLUniformLocation;
  yaw = 0.3;
  pitch = 0.1;
  radius = 3.0;
  flatShading = false;

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl2");
    if (!gl) throw new Error("WebGL2 unavailable");
    this.gl = gl;
    this.program = this.link(VS, FS);
    this.vao = gl.createVertexArray()!;
    this.posBuf = gl.createBuffer()!;
    this.nrmBuf = gl.createBuffer()!;
    this.idxBuf = gl.createBuffer()!;
    this.uMvp = gl.getUniformLocation(this.program, "mvp")!;
    this.uFlat = gl.getUniformLocation(this.program, "uFlat")!;
    this.uEye = gl.getUniformLocation(this.program, "uEye")!;
    gl.enable(gl.DEPTH_TEST);
    this.attachControls();
  }

  private link(vsSrc: string, fsSrc: string): WebGLProgram {
    const gl = this.gl;
    const compile = (type: number, src: string) => {
      const sh = gl.createShader(type)!;
      gl.shaderSource(sh, src);
      gl.compileShader(sh);
      if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
        throw new Error(gl.getShaderInfoLog(sh) ?? "shader error");
      }
      return sh;
    };
    const prog = gl.createProgram()!;
    gl.attachShader(prog, compile(gl.VERTEX_SHADER, vsSrc));
    gl.attachShader(prog, compile(gl.FRAGMENT_SHADER, fsSrc));
    gl.linkProgram(prog);
    if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
      throw new Error(gl.getProgramInfoLog(prog) ?? "link error");
    }
    return prog;
  }

  setTopology(faces: Uint32Array, nVertices: number): void {
    const gl = this.gl;
    this.faces = faces;
    this.normals = new Float32Array(nVertices * 3);
    this.nIndices = faces.length;
    gl.bindVertexArray(this.vao);
    gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, this.idxBuf);
    gl.bufferData(gl.ELEMENT_ARRAY_BUFFER, faces, gl.STATIC_DRAW);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.bufferData(gl.ARRAY_BUFFER, nVertices * 12, gl.DYNAMIC_DRAW);
    gl.enableVertexAttribArray(0);
    gl.vertexAttribPointer(0, 3, gl.FLOAT, false, 0, 0);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.nrmBuf);
    gl.bufferData(gl.ARRAY_BUFFER, nVertices * 12, gl.DYNAMIC_DRAW);
    gl.enableVertexAttribArray(1);
    gl.vertexAttribPointer(1, 3, gl.FLOAT, false, 0, 0);
    gl.bindAttribLocation(this.program, 0, "position");
    gl.bindAttribLocation(this.program, 1, "normal");
    gl.linkProgram(this.program);
    gl.bindVertexArray(null);
  }

  updatePositions(positions: Float32Array): void {
    const gl = this.gl;
    vertexNormals(positions, this.faces, this.normals);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.posBuf);
    gl.bufferSubData(gl.ARRAY_BUFFER, 0, positions);
    gl.bindBuffer(gl.ARRAY_BUFFER, this.nrmBuf);
    gl.bufferSubData(gl.ARRAY_BUFFER, 0, this.normals);
  }

  render(): void {
    const gl = this.gl;
    const w = this.canvas.clientWidth || this.canvas.width;
    const h = this.canvas.clientHeight || this.canvas.height;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.canvas.width = w;
      this.canvas.height = h;
    }
    gl.viewport(0, 0, w, h);
    gl.clearColor(0.12, 0.13, 0.16, 1);
    gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
    if (!this.nIndices) return;
    const eye = orbitEye(this.radius, this.yaw, this.pitch);
    const mvp: Mat4 = multiply(
      perspective(Math.PI / 5, w / h, 0.05, 100),
      lookAt(eye, [0, 0, 0], [0, 1, 0]),
    );
    gl.useProgram(this.program);
    gl.uniformMatrix4fv(this.uMvp, false, mvp);
    gl.uniform1f(this.uFlat, this.flatShading ? 1 : 0);
    gl.uniform3f(this.uEye, eye[0], eye[1], eye[2]);
    gl.bindVertexArray(this.vao);
    gl.drawElements(gl.TRIANGLES, this.nIndices, gl.UNSIGNED_INT, 0);
    gl.bindVertexArray(null);
  }

  private attachControls(): void {
    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    this.canvas.addEventListener("pointerdown", (e) => {
      dragging = true;
      lastX = e.clientX;
      lastY = e.clientY;
      this.canvas.setPointerCapture(e.pointerId);
    });
    this.canvas.addEventListener("pointerup", () => (dragging = false));
    this.canvas.addEventListener("pointermove", (e) => {
      if (!dragging) return;
      this.yaw += (e.clientX - lastX) * 0.01;
      this.pitch += (e.clientY - lastY) * 0.01;
      this.pitch = Math.max(-1.4, Math.min(1.4, this.pitch));
      lastX = e.clientX;
      lastY = e.clientY;
    });
    this.canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.radius *= Math.exp(e.deltaY * 0.001);
      this.radius = Math.max(1.2, Math.min(12, this.radius));
    });
  }
}
